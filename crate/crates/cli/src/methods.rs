//! Reconstruction methods behind one interface, with timing and scoring.

use std::time::Instant;

use anyhow::{anyhow, Result};
use mutomo_core::dataset::Sample;
use mutomo_core::metrics::{evaluate, EvalReport};
use mutomo_core::mlem::mlem_reconstruct;
use mutomo_core::phantom::VoxelGrid;
use mutomo_core::poca::poca_reconstruct;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Poca,
    Mlem,
    Munet,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Poca => "poca",
            Method::Mlem => "mlem",
            Method::Munet => "munet",
        }
    }
}

/// Reconstruct every sample; also returns the wall time in seconds.
pub fn reconstruct(method: Method, samples: &[Sample], config: &RunConfig, model: Option<&Model>) -> Result<(Vec<VoxelGrid>, f64)> {
    let extent = config.extent();
    let start = Instant::now();
    let grids = match method {
        Method::Poca => {
            let cfg = config.poca_config();
            samples.par_iter().map(|s| Ok(poca_reconstruct(&s.events, extent, &cfg)?)).collect::<Result<Vec<_>>>()?
        }
        Method::Mlem => {
            let cfg = config.mlem_config();
            samples.par_iter().map(|s| Ok(mlem_reconstruct(&s.events, extent, &cfg)?.grid)).collect::<Result<Vec<_>>>()?
        }
        Method::Munet => {
            let m = model.ok_or_else(|| anyhow!("method munet needs a trained model; pass --checkpoint"))?;
            samples
                .par_iter()
                .map(|s| Ok(m.net.reconstruct(&m.params, &s.events, extent)?))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok((grids, start.elapsed().as_secs_f64()))
}

pub fn score(predictions: &[VoxelGrid], truth: &[Sample], peak: f64, seconds: f64) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(anyhow!("{} reconstructions for {} ground-truth samples", predictions.len(), truth.len()));
    }
    let pairs: Vec<(VoxelGrid, VoxelGrid)> =
        predictions.iter().cloned().zip(truth.iter().map(|s| s.grid.clone())).collect();
    Ok(evaluate(&pairs, peak, seconds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_split, Conditions, Split};

    #[test]
    fn classical_methods_score_better_than_nothing() {
        let mut c = RunConfig { resolution: 8, ..RunConfig::default() };
        c.dataset.test = 2;
        c.dataset.dosage = 2000;
        c.mlem.max_iterations = 5;
        let test = build_split(&c, Split::Test, &Conditions::of(&c)).unwrap();
        let zeros: Vec<VoxelGrid> = test.iter().map(|_| VoxelGrid::zeros(8, c.extent()).unwrap()).collect();
        let floor = score(&zeros, &test, c.metrics.peak, 0.0).unwrap();
        for m in [Method::Poca, Method::Mlem] {
            let (grids, _) = reconstruct(m, &test, &c, None).unwrap();
            assert_eq!(grids.len(), 2);
            assert_eq!(grids[0].resolution(), 8);
            let r = score(&grids, &test, c.metrics.peak, 0.0).unwrap();
            assert!(r.mse.is_finite() && r.mse != floor.mse, "{m:?}");
        }
        assert!(reconstruct(Method::Munet, &test, &c, None).is_err());
    }
}
