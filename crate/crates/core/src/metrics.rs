//! Voxelwise error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::VoxelGrid;

/// Default PSNR peak, cm⁻¹: roughly the scattering density of the densest
/// library material.
pub const DEFAULT_PEAK: f64 = 3.45;

/// (MSE, MAE) between two grids of identical shape.
pub fn voxel_metrics(pred: &VoxelGrid, truth: &VoxelGrid) -> Result<(f64, f64)> {
    if pred.resolution() != truth.resolution() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}³ vs truth {}³",
            pred.resolution(),
            truth.resolution()
        )));
    }
    slice_metrics(pred.values(), truth.values())
}

pub fn slice_metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let (se, ae) = pred.iter().zip(truth).fold((0.0, 0.0), |(se, ae), (p, t)| {
        let d = p - t;
        (se + d * d, ae + d.abs())
    });
    Ok((se / n, ae / n))
}

/// 10·log₁₀(peak²/mse); `f64::INFINITY` for a perfect reconstruction.
pub fn psnr(mse: f64, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("PSNR peak {peak} must be positive")));
    }
    if !(mse >= 0.0) {
        return Err(Error::InvalidArgument(format!("MSE {mse} must be non-negative")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Peak implied by a reported (MSE, PSNR) pair.
pub fn peak_from(mse: f64, psnr_db: f64) -> f64 {
    (mse * 10f64.powf(psnr_db / 10.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    /// Mean of per-sample PSNR.
    pub psnr_mean: f64,
    pub count: usize,
    pub seconds: f64,
}

/// Aggregate over samples: mean MSE, mean MAE and mean per-sample PSNR.
pub fn evaluate(pairs: &[(VoxelGrid, VoxelGrid)], peak: f64, seconds: f64) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::NoData("no samples to evaluate".into()));
    }
    let mut mse = 0.0;
    let mut mae = 0.0;
    let mut psnr_sum = 0.0;
    for (pred, truth) in pairs {
        let (s, a) = voxel_metrics(pred, truth)?;
        mse += s;
        mae += a;
        psnr_sum += psnr(s, peak)?;
    }
    let n = pairs.len() as f64;
    Ok(EvalReport { mse: mse / n, mae: mae / n, psnr_mean: psnr_sum / n, count: pairs.len(), seconds })
}
