//! Dataset splits: phantoms and their simulated events, seeded per sample
//! so any split can be regenerated under different detector conditions with
//! the same truth.

use anyhow::Result;
use mutomo_core::dataset::Sample;
use mutomo_core::phantom::{generate_phantom, MaterialLibrary, VoxelGrid};
use mutomo_core::simulator::{simulate_event_set, SimConfig};
use rayon::prelude::*;

use crate::config::{derive_seed, RunConfig, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn offset(self) -> u64 {
        (self as u64) << 32
    }

    pub fn size(self, config: &RunConfig) -> usize {
        match self {
            Split::Train => config.dataset.train,
            Split::Val => config.dataset.val,
            Split::Test => config.dataset.test,
        }
    }
}

/// What a sweep varies: muons per sample and the detector model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditions {
    pub dosage: usize,
    pub simulation: SimConfig,
}

impl Conditions {
    pub fn of(config: &RunConfig) -> Self {
        Conditions { dosage: config.dataset.dosage, simulation: config.simulation }
    }
}

pub fn phantom(config: &RunConfig, split: Split, index: usize) -> Result<VoxelGrid> {
    let seed = derive_seed(config.seed, Stream::Phantom, split.offset() + index as u64);
    Ok(generate_phantom(seed, &config.phantom_config(), config.extent(), &MaterialLibrary::default())?)
}

pub fn phantoms(config: &RunConfig, split: Split, count: usize) -> Result<Vec<VoxelGrid>> {
    (0..count).into_par_iter().map(|i| phantom(config, split, i)).collect()
}

/// Events for each grid, which is taken to be sample `index` of `split`.
/// Events are rounded to the precision of the dataset file, so a split
/// held in memory is exactly what reading it back from disk would give.
pub fn simulate(config: &RunConfig, split: Split, grids: Vec<VoxelGrid>, cond: &Conditions) -> Result<Vec<Sample>> {
    grids
        .into_par_iter()
        .enumerate()
        .map(|(i, grid)| {
            let seed = derive_seed(config.seed, Stream::Simulation, split.offset() + i as u64);
            let events = simulate_event_set(&grid, cond.dosage, &cond.simulation, seed)?;
            Ok(Sample::quantized(grid, events)?)
        })
        .collect()
}

pub fn build_split(config: &RunConfig, split: Split, cond: &Conditions) -> Result<Vec<Sample>> {
    simulate(config, split, phantoms(config, split, split.size(config))?, cond)
}
