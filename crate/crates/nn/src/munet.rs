//! The full two-stage model: projector MLP → scatter → fuse → U-Net.

use mutomo_core::{GridSpec, MuonEvent, VoxelGrid};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::{gelu, Linear};
use crate::params::{Grads, ParamStore, Registry};
use crate::real::Real;
use crate::scatter::{combine, place_events, scatter_backward, scatter_features, ScatterConfig, FEATURES};
use crate::tensor::Tensor4;
use crate::unet::{UNet, UNetCache, UNetConfig};

/// Fixed per-feature input scaling ahead of the projector. Only the chord is
/// rescaled: typical scattering chords are milliradians.
pub const INPUT_SCALE: [f64; FEATURES] = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuNetConfig {
    pub unet: UNetConfig,
    pub scatter: ScatterConfig,
    /// Hidden width of the projector MLP.
    pub hidden: usize,
}

impl MuNetConfig {
    pub fn nano() -> Self {
        MuNetConfig { unet: UNetConfig::nano(), scatter: ScatterConfig::default(), hidden: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.scatter.validate()?;
        self.unet.check_resolution(self.scatter.resolution)?;
        if self.scatter.channels != self.unet.in_channels {
            return Err(NnError::Config(format!(
                "scatter channels {} differ from U-Net input channels {}",
                self.scatter.channels, self.unet.in_channels
            )));
        }
        if self.hidden == 0 {
            return Err(NnError::Config("projector hidden width must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable text identifying the architecture, stored in checkpoints.
    /// Placement seed and threshold are left out: they change what the
    /// model sees, not the shape of its parameters.
    pub fn fingerprint(&self) -> String {
        let s = &self.scatter;
        format!(
            "munet r={} d={} c={} hidden={} unet={:?}",
            s.resolution, s.point_size, s.channels, self.hidden, self.unet
        )
    }
}

/// Placed muons of one sample, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEvents<T> {
    /// Scaled features, one row of 14 per placed muon.
    pub inputs: Vec<T>,
    pub centers: Vec<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub struct MuNet {
    pub config: MuNetConfig,
    registry: Registry,
    proj_in: Linear,
    proj_out: Linear,
    fuse: Linear,
    unet: UNet,
}

#[derive(Debug, Clone)]
pub struct MuNetCache<T> {
    hidden: Vec<T>,
    gelu_grad: Vec<T>,
    activated: Vec<T>,
    volume: Tensor4<T>,
    unet: UNetCache<T>,
}

impl MuNet {
    pub fn new(config: MuNetConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::new();
        let s = &config.scatter;
        let proj_in = Linear::new(&mut reg, "scatter.mlp1.0", FEATURES, config.hidden);
        let proj_out = Linear::new(&mut reg, "scatter.mlp1.1", config.hidden, s.block_len());
        let fuse = Linear::new(&mut reg, "scatter.mlp2", s.channels + 1, s.channels);
        let unet = UNet::new(&mut reg, "unet", &config.unet)?;
        Ok(MuNet { config, registry: reg, proj_in, proj_out, fuse, unet })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn fuse(&self) -> &Linear {
        &self.fuse
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.registry.init(seed)
    }

    pub fn prepare<T: Real>(&self, events: &[MuonEvent], extent: f64) -> Result<PreparedEvents<T>> {
        let placed = place_events(events, &self.config.scatter, extent)?;
        let mut inputs = Vec::with_capacity(placed.len() * FEATURES);
        for p in &placed {
            inputs.extend(p.features.iter().zip(INPUT_SCALE).map(|(&f, s)| T::of(f * s)));
        }
        Ok(PreparedEvents { inputs, centers: placed.into_iter().map(|p| p.center).collect() })
    }

    /// Projected d³·c blocks, one row per placed muon.
    pub fn project<T: Real>(&self, p: &ParamStore<T>, inputs: &[T]) -> Vec<T> {
        let (a, _) = gelu(&self.proj_in.forward(p, inputs));
        self.proj_out.forward(p, &a)
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &PreparedEvents<T>) -> Result<(Tensor4<T>, MuNetCache<T>)> {
        let s = &self.config.scatter;
        let hidden = self.proj_in.forward(p, &x.inputs);
        let (activated, gelu_grad) = gelu(&hidden);
        let blocks = self.proj_out.forward(p, &activated);
        let volume = scatter_features(&blocks, &x.centers, s.resolution, s.point_size, s.channels)?;
        let fused = combine(p, &self.fuse, &volume)?;
        let (y, unet) = self.unet.forward(p, &fused)?;
        Ok((y, MuNetCache { hidden, gelu_grad, activated, volume, unet }))
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &PreparedEvents<T>, cache: &MuNetCache<T>, dy: &Tensor4<T>) {
        let s = &self.config.scatter;
        let d_fused = self.unet.backward(p, g, &cache.unet, dy);
        let d_volume = self.fuse.backward(p, g, cache.volume.data(), d_fused.data());
        let d_volume = cache.volume.with_channels(s.channels + 1, d_volume);
        let d_blocks = scatter_backward(&d_volume, &x.centers, s.point_size, s.channels);
        let d_act = self.proj_out.backward(p, g, &cache.activated, &d_blocks);
        debug_assert_eq!(cache.hidden.len(), d_act.len());
        let d_hidden: Vec<T> = d_act.iter().zip(&cache.gelu_grad).map(|(&a, &b)| a * b).collect();
        self.proj_in.backward_params(g, &x.inputs, &d_hidden);
    }

    /// Voxelwise MSE against `target` and its parameter gradients.
    pub fn loss_and_grads<T: Real>(&self, p: &ParamStore<T>, x: &PreparedEvents<T>, target: &[T]) -> Result<(f64, Grads<T>)> {
        let (y, cache) = self.forward(p, x)?;
        if target.len() != y.voxels() {
            return Err(NnError::Shape(format!("target has {} voxels, prediction {}", target.len(), y.voxels())));
        }
        let n = T::of(target.len() as f64);
        let two = T::of(2.0);
        let mut loss = 0.0;
        let mut dy = Vec::with_capacity(target.len());
        for (&pv, &tv) in y.data().iter().zip(target) {
            let e = pv - tv;
            loss += e.as_f64() * e.as_f64();
            dy.push(two * e / n);
        }
        let mut g = p.zero_grads();
        self.backward(p, &mut g, x, &cache, &y.with_channels(1, dy));
        Ok((loss / target.len() as f64, g))
    }

    pub fn predict_prepared<T: Real>(&self, p: &ParamStore<T>, x: &PreparedEvents<T>) -> Result<Vec<f64>> {
        let (y, _) = self.forward(p, x)?;
        Ok(y.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Reconstructed density grid for one event set.
    pub fn reconstruct<T: Real>(&self, p: &ParamStore<T>, events: &[MuonEvent], extent: f64) -> Result<VoxelGrid> {
        let x = self.prepare::<T>(events, extent)?;
        let r = self.config.scatter.resolution;
        GridSpec::new(r, extent)?;
        Ok(VoxelGrid::from_values(r, extent, self.predict_prepared(p, &x)?)?)
    }
}
