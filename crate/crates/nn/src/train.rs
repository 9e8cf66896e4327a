//! Minibatch training of the full model on (events, phantom) pairs.

use mutomo_core::{MuonEvent, VoxelGrid};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::munet::{MuNet, PreparedEvents};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Grads, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter initialization and the per-epoch shuffles.
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 15, batch_size: 8, seed: 0, optimizer: AdamWConfig::default(), schedule: Schedule::default() }
    }
}

/// Learning-rate multiplier over the steps of one `train` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from 1 at the first step towards 0 after the last.
    Cosine,
}

impl Schedule {
    pub fn scale(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    pub events: PreparedEvents<T>,
    pub target: Vec<T>,
}

impl<T: Real> TrainSample<T> {
    pub fn new(model: &MuNet, truth: &VoxelGrid, events: &[MuonEvent]) -> Result<Self> {
        let r = model.config.scatter.resolution;
        if truth.resolution() != r {
            return Err(NnError::Shape(format!("phantom is {}³, model works at {r}³", truth.resolution())));
        }
        Ok(TrainSample {
            events: model.prepare(events, truth.extent())?,
            target: truth.values().iter().map(|&v| T::of(v)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the minibatch losses seen during the epoch.
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Sample order of one epoch, fixed by (seed, epoch).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean loss and mean gradient over a batch; per-sample gradients are
/// summed in batch order whatever the thread schedule.
pub fn batch_gradients<T: Real>(model: &MuNet, params: &ParamStore<T>, batch: &[&TrainSample<T>]) -> Result<(f64, Grads<T>)> {
    let results: Vec<Result<(f64, Grads<T>)>> =
        batch.par_iter().map(|s| model.loss_and_grads(params, &s.events, &s.target)).collect();
    let mut total = params.zero_grads();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let n = batch.len() as f64;
    total.scale(T::of(1.0 / n));
    Ok((loss / n, total))
}

pub fn mean_mse<T: Real>(model: &MuNet, params: &ParamStore<T>, samples: &[TrainSample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let per: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict_prepared(params, &s.events)?;
            let se: f64 = pred.iter().zip(&s.target).map(|(p, t)| (p - t.as_f64()).powi(2)).sum();
            Ok(se / pred.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for v in per {
        sum += v?;
    }
    Ok(sum / samples.len() as f64)
}

/// Train in place. On a non-finite loss or gradient the run stops with an
/// error and `params` keeps the last good values.
pub fn train<T: Real>(
    model: &MuNet,
    params: &mut ParamStore<T>,
    optimizer: &mut AdamW<T>,
    train_set: &[TrainSample<T>],
    val_set: &[TrainSample<T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train_set.is_empty() {
        return Err(NnError::Config("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(NnError::Config("batch size must be at least 1".into()));
    }
    let mut logs = Vec::with_capacity(config.epochs);
    let total = config.epochs * train_set.len().div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, train_set.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainSample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(model, params, &batch)?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b}")));
            }
            optimizer.step_scaled(params, &grads, config.schedule.scale(step, total))?;
            step += 1;
            sum += loss;
            batches += 1;
        }
        let log = EpochLog { epoch, train_mse: sum / batches as f64, val_mse: mean_mse(model, params, val_set)? };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::Schedule;

    #[test]
    fn cosine_runs_from_one_to_zero() {
        assert_eq!(Schedule::Constant.scale(7, 10), 1.0);
        assert_eq!(Schedule::Cosine.scale(0, 10), 1.0);
        assert!((Schedule::Cosine.scale(5, 10) - 0.5).abs() < 1e-15);
        assert!(Schedule::Cosine.scale(10, 10).abs() < 1e-15);
        assert_eq!(Schedule::default(), Schedule::Constant);
    }
}
