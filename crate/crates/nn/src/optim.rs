//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{Grads, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-3, weight_decay: 4e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        AdamW { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. A non-finite gradient aborts before anything is touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        self.step_scaled(params, grads, 1.0)
    }

    /// One update with the learning rate multiplied by `lr_scale`; the
    /// decoupled decay scales with it.
    pub fn step_scaled(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr_scale: f64) -> Result<()> {
        for (spec, g) in params.specs().iter().zip(grads.tensors()) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(format!(
                    "gradient of {}[{i}] is {:?} at step {}",
                    spec.name,
                    g[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = c.lr * lr_scale;
        let decay = T::of(1.0 - lr * c.weight_decay);
        let lr = T::of(lr);
        let eps = T::of(c.eps);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
