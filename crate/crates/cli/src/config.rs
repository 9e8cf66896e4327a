//! Run configuration: one TOML file holding every module's settings.
//!
//! Grid resolution and the scattering threshold are stated once and handed
//! to each module, so the phantom, the reconstructors and the model cannot
//! disagree about them.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mutomo_core::metrics::DEFAULT_PEAK;
use mutomo_core::mlem::MlemConfig;
use mutomo_core::phantom::{NoiseConfig, PhantomConfig};
use mutomo_core::poca::{PocaConfig, DEFAULT_SCATTER_THRESHOLD};
use mutomo_core::simulator::SimConfig;
use mutomo_nn::optim::AdamWConfig;
use mutomo_nn::scatter::ScatterConfig;
use mutomo_nn::train::{Schedule, TrainConfig};
use mutomo_nn::unet::{UNetConfig, DEFAULT_KERNEL};
use mutomo_nn::MuNetConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in a run; `--seed` overrides it.
    pub seed: u64,
    /// Voxels per side of phantoms and reconstructions.
    pub resolution: usize,
    /// Scattering threshold, rad: on the plane angle for PoCA, on the
    /// direction chord for the scatter operation.
    pub scatter_threshold: f64,
    pub phantom: PhantomSection,
    pub simulation: SimConfig,
    pub dataset: DatasetSection,
    pub poca: PocaSection,
    pub mlem: MlemSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub occupancy_threshold: f64,
    pub noise: NoiseConfig,
}

/// Split sizes and muons per sample. Paper scale is 20000 / 1600 / 1600
/// phantoms at 64³; the defaults are a desk-sized stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub dosage: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PocaSection {
    /// Reference momentum, MeV/c.
    pub p0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlemSection {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub lambda_floor: f64,
    pub initial_lambda: f64,
    pub p0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// nano, tiny, base or large.
    pub variant: String,
    pub kernel: usize,
    pub point_size: usize,
    /// Projector hidden width.
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs used when adapting a trained model to new conditions.
    pub finetune_epochs: usize,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// PSNR peak, cm⁻¹.
    pub peak: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            resolution: 16,
            scatter_threshold: DEFAULT_SCATTER_THRESHOLD,
            phantom: PhantomSection::default(),
            simulation: SimConfig::default(),
            dataset: DatasetSection::default(),
            poca: PocaSection::default(),
            mlem: MlemSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        PhantomSection { occupancy_threshold: p.occupancy_threshold, noise: p.noise }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { train: 512, val: 64, test: 64, dosage: 1024 }
    }
}

impl Default for PocaSection {
    fn default() -> Self {
        PocaSection { p0: PocaConfig::default().p0 }
    }
}

impl Default for MlemSection {
    fn default() -> Self {
        let m = MlemConfig::default();
        MlemSection {
            max_iterations: m.max_iterations,
            tolerance: m.tolerance,
            lambda_floor: m.lambda_floor,
            initial_lambda: m.initial_lambda,
            p0: m.p0,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { variant: "nano".into(), kernel: DEFAULT_KERNEL, point_size: 1, hidden: 64 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection { epochs: t.epochs, batch_size: t.batch_size, finetune_epochs: 10, schedule: t.schedule, optimizer: t.optimizer }
    }
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { peak: DEFAULT_PEAK }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn extent(&self) -> f64 {
        self.simulation.geometry.object_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            bail!("resolution must be at least 1");
        }
        if !(self.scatter_threshold >= 0.0) {
            bail!("scatter_threshold must be non-negative");
        }
        if self.dataset.dosage == 0 {
            bail!("dataset.dosage must be at least 1");
        }
        if !(self.metrics.peak > 0.0) {
            bail!("metrics.peak must be positive");
        }
        self.simulation.validate()?;
        self.mlem_config().validate()?;
        self.model_config()?.validate()?;
        Ok(())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            resolution: self.resolution,
            occupancy_threshold: self.phantom.occupancy_threshold,
            noise: self.phantom.noise,
        }
    }

    pub fn poca_config(&self) -> PocaConfig {
        PocaConfig { resolution: self.resolution, scatter_threshold: self.scatter_threshold, p0: self.poca.p0 }
    }

    pub fn mlem_config(&self) -> MlemConfig {
        let m = &self.mlem;
        MlemConfig {
            max_iterations: m.max_iterations,
            tolerance: m.tolerance,
            lambda_floor: m.lambda_floor,
            resolution: self.resolution,
            initial_lambda: m.initial_lambda,
            p0: m.p0,
        }
    }

    pub fn model_config(&self) -> Result<MuNetConfig> {
        let mut unet = UNetConfig::named(&self.model.variant)?;
        unet.kernel = self.model.kernel;
        let scatter = ScatterConfig {
            resolution: self.resolution,
            point_size: self.model.point_size,
            channels: unet.in_channels,
            threshold: self.scatter_threshold,
            seed: derive_seed(self.seed, Stream::Placement, 0),
        };
        Ok(MuNetConfig { unet, scatter, hidden: self.model.hidden })
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            seed: derive_seed(self.seed, Stream::Shuffle, 0),
            optimizer: self.train.optimizer,
            schedule: self.train.schedule,
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Phantom,
    Simulation,
    Placement,
    Init,
    Shuffle,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ index)
}
