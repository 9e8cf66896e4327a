//! The trained-model side of the CLI: building, training, fine-tuning and
//! checkpointing μ-Net.

use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use mutomo_core::dataset::Sample;
use mutomo_nn::checkpoint::Checkpoint;
use mutomo_nn::optim::AdamW;
use mutomo_nn::params::ParamStore;
use mutomo_nn::train::{train, EpochLog, TrainSample};
use mutomo_nn::{MuNet, NnError};
use rayon::prelude::*;

use crate::config::{derive_seed, RunConfig, Stream};

/// A model with its parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: MuNet,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
}

impl Model {
    pub fn fresh(config: &RunConfig) -> Result<Self> {
        let net = MuNet::new(config.model_config()?)?;
        let params = net.init_params(derive_seed(config.seed, Stream::Init, 0));
        let optimizer = AdamW::new(config.train.optimizer, &params);
        Ok(Model { net, params, optimizer })
    }

    /// Restore a checkpoint; its architecture must match the configuration.
    pub fn load(config: &RunConfig, path: &Path) -> Result<Self> {
        let net = MuNet::new(config.model_config()?)?;
        let ck = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let params = ck.params_for(&net.config.fingerprint(), &net.init_params(0))?;
        let optimizer = ck.optimizer(config.train.optimizer);
        Ok(Model { net, params, optimizer })
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint::new(self.net.config.fingerprint(), &self.params, &self.optimizer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path).with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn training_set(&self, samples: &[Sample]) -> Result<Vec<TrainSample<f32>>> {
        Ok(samples.par_iter().map(|s| TrainSample::new(&self.net, &s.grid, &s.events)).collect::<Result<_, _>>()?)
    }

    /// Train for `epochs`, continuing from the current parameters and
    /// optimizer moments. On a non-finite loss the model keeps its last good
    /// state and, when `fallback` is given, that state is written there
    /// before the error is returned.
    pub fn fit(
        &mut self,
        config: &RunConfig,
        train_set: &[Sample],
        val_set: &[Sample],
        epochs: usize,
        fallback: Option<&Path>,
    ) -> Result<Vec<EpochLog>> {
        let tr = self.training_set(train_set)?;
        let va = self.training_set(val_set)?;
        let cfg = config.train_config(epochs);
        let result = train(&self.net, &mut self.params, &mut self.optimizer, &tr, &va, &cfg, |l| {
            info!("epoch {} train_mse {:.6} val_mse {:.6}", l.epoch, l.train_mse, l.val_mse);
        });
        match result {
            Ok(logs) => Ok(logs),
            Err(e @ NnError::NonFinite(_)) => {
                if let Some(path) = fallback {
                    self.save(path)?;
                    info!("wrote last good checkpoint to {}", path.display());
                }
                Err(e.into())
            }
            Err(e) => Err(e.into()),
        }
    }
}
