//! Muon scattering tomography: phantom generation, Monte Carlo transport,
//! classical reconstructions (PoCA, MLEM), metrics and dataset files.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod mlem;
pub mod phantom;
pub mod poca;
pub mod raytrace;
pub mod simulator;
pub mod vec3;

pub use error::{Error, Result};
pub use phantom::{GridSpec, Material, MaterialLibrary, VoxelGrid};
pub use simulator::{MuonEvent, SimConfig};
pub use vec3::Vec3;
