//! Grayscale slices of a density grid as binary portable graymaps.

use anyhow::{bail, Result};
use mutomo_core::phantom::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

/// The r × r slice at `index` along `axis`, mapping [0, peak] linearly onto
/// [0, 255] and clipping outside it. Rows run along the second remaining
/// axis, columns along the first.
pub fn render_slice(grid: &VoxelGrid, axis: SliceAxis, index: usize, peak: f64) -> Result<Vec<u8>> {
    let r = grid.resolution();
    if index >= r {
        bail!("slice index {index} outside 0..{r}");
    }
    if !(peak > 0.0) {
        bail!("peak {peak} must be positive");
    }
    let spec = grid.spec();
    let values = grid.values();
    let mut out = format!("P5\n{r} {r}\n255\n").into_bytes();
    for row in 0..r {
        for col in 0..r {
            let ijk = match axis {
                SliceAxis::X => [index, col, row],
                SliceAxis::Y => [col, index, row],
                SliceAxis::Z => [col, row, index],
            };
            let v = values[spec.index(ijk)] / peak;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
