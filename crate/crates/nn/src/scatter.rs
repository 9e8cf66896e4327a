//! Scatter operation: per-muon feature blocks placed at PoCA points (or at
//! a random point of the straight track for muons that did not scatter),
//! summed into a volume that carries a hit-counter channel.

use mutomo_core::poca::{closest_approach, DEFAULT_SCATTER_THRESHOLD};
use mutomo_core::{GridSpec, MuonEvent, Vec3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor4;

pub const FEATURES: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScatterConfig {
    pub resolution: usize,
    /// Edge d of the cubic block each muon writes; odd.
    pub point_size: usize,
    pub channels: usize,
    /// Chord |p̂_f − p̂₀| above which a muon counts as scattered.
    pub threshold: f64,
    /// Keys the random placement of unscattered muons.
    pub seed: u64,
}

impl Default for ScatterConfig {
    fn default() -> Self {
        ScatterConfig { resolution: 16, point_size: 1, channels: 8, threshold: DEFAULT_SCATTER_THRESHOLD, seed: 0 }
    }
}

impl ScatterConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.point_size;
        if d == 0 || d % 2 == 0 || self.channels == 0 || self.resolution < d {
            return Err(NnError::Config(format!(
                "scatter needs odd point size d ≥ 1, channels ≥ 1 and r ≥ d, got d = {d}, c = {}, r = {}",
                self.channels, self.resolution
            )));
        }
        if !(self.threshold >= 0.0) {
            return Err(NnError::Config(format!("scatter threshold {} must be non-negative", self.threshold)));
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.point_size.pow(3) * self.channels
    }
}

/// x₀, x_f, p̂₀, p̂_f, |p| (GeV), |p̂_f − p̂₀|; positions in units of the
/// object half-side, so the cube spans [−1, 1].
pub fn featurize(event: &MuonEvent, half_extent: f64) -> [f64; FEATURES] {
    let mut f = [0.0; FEATURES];
    let vecs = [
        event.entry_position / half_extent,
        event.exit_position / half_extent,
        event.entry_direction,
        event.exit_direction,
    ];
    for (n, v) in vecs.iter().enumerate() {
        f[3 * n..3 * n + 3].copy_from_slice(&v.to_array());
    }
    f[12] = event.momentum / 1000.0;
    f[13] = (event.exit_direction - event.entry_direction).norm();
    f
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of the event's contents. Random placement is keyed by it rather than
/// by list position, so the volume does not depend on event order.
pub fn event_key(features: &[f64; FEATURES]) -> u64 {
    features.iter().fold(0x6D75_746F_6D6F_u64, |h, v| splitmix(h ^ v.to_bits()))
}

pub fn placement_rng(seed: u64, features: &[f64; FEATURES]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed) ^ event_key(features))
}

/// Where a muon's block goes: its PoCA if scattered (none if that lies
/// outside the cube), otherwise a uniform point of the straight incoming
/// track inside the cube (none if the track misses it).
pub fn placement_point(event: &MuonEvent, threshold: f64, half_extent: f64, rng: &mut impl Rng) -> Option<Vec3> {
    let inside = |p: Vec3| (0..3).all(|a| p[a].abs() <= half_extent);
    if event.chord() > threshold {
        let poca = closest_approach(&event.incoming(), &event.outgoing());
        return inside(poca.point).then_some(poca.point);
    }
    let ray = event.incoming();
    let (t0, t1) = ray.clip_cube(half_extent)?;
    let t = t0 + (t1 - t0) * rng.random::<f64>();
    Some(ray.at(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedEvent {
    pub features: [f64; FEATURES],
    pub center: [usize; 3],
}

/// Placed events in canonical order: by centre voxel index, then by the
/// bit patterns of the features. Events without a placement are dropped.
pub fn place_events(events: &[MuonEvent], config: &ScatterConfig, extent: f64) -> Result<Vec<PlacedEvent>> {
    config.validate()?;
    let spec = GridSpec::new(config.resolution, extent)?;
    let half = spec.half_extent();
    let mut placed: Vec<PlacedEvent> = events
        .iter()
        .filter_map(|e| {
            let features = featurize(e, half);
            let mut rng = placement_rng(config.seed, &features);
            let point = placement_point(e, config.threshold, half, &mut rng)?;
            Some(PlacedEvent { features, center: spec.voxel_of_clamped(point) })
        })
        .collect();
    placed.sort_by(|a, b| {
        spec.index(a.center).cmp(&spec.index(b.center)).then_with(|| {
            a.features.iter().map(|v| v.to_bits()).cmp(b.features.iter().map(|v| v.to_bits()))
        })
    });
    Ok(placed)
}

/// Calls `f(event, block cell, volume voxel)` for every in-bounds cell of
/// every block, events in list order.
fn for_each_cell(centers: &[[usize; 3]], r: usize, d: usize, mut f: impl FnMut(usize, usize, usize)) {
    let h = (d / 2) as isize;
    for (n, c) in centers.iter().enumerate() {
        let mut cell = 0;
        for bz in 0..d as isize {
            for by in 0..d as isize {
                for bx in 0..d as isize {
                    let z = c[2] as isize + bz - h;
                    let y = c[1] as isize + by - h;
                    let x = c[0] as isize + bx - h;
                    let r = r as isize;
                    if (0..r).contains(&x) && (0..r).contains(&y) && (0..r).contains(&z) {
                        f(n, cell, (x + r * (y + r * z)) as usize);
                    }
                    cell += 1;
                }
            }
        }
    }
}

/// Sum the d³×c blocks (row n of `blocks` belongs to `centers[n]`) into an
/// r³×(c+1) volume; the last channel counts the blocks covering each voxel.
/// Cells falling outside the volume are dropped.
pub fn scatter_features<T: Real>(blocks: &[T], centers: &[[usize; 3]], r: usize, d: usize, c: usize) -> Result<Tensor4<T>> {
    let len = d * d * d * c;
    if blocks.len() != centers.len() * len {
        return Err(NnError::Shape(format!("{} block values for {} events of {len}", blocks.len(), centers.len())));
    }
    let cw = c + 1;
    let mut out = vec![T::zero(); r * r * r * cw];
    for_each_cell(centers, r, d, |n, cell, v| {
        let src = &blocks[n * len + cell * c..n * len + (cell + 1) * c];
        let dst = &mut out[v * cw..(v + 1) * cw];
        for (o, &s) in dst.iter_mut().zip(src) {
            *o += s;
        }
        dst[c] += T::one();
    });
    Tensor4::cube(r, cw, out)
}

/// Gradient of the scattered volume with respect to each block.
pub fn scatter_backward<T: Real>(d_volume: &Tensor4<T>, centers: &[[usize; 3]], d: usize, c: usize) -> Vec<T> {
    let r = d_volume.shape()[0];
    let cw = c + 1;
    let len = d * d * d * c;
    let dv = d_volume.data();
    let mut out = vec![T::zero(); centers.len() * len];
    for_each_cell(centers, r, d, |n, cell, v| {
        out[n * len + cell * c..n * len + (cell + 1) * c].copy_from_slice(&dv[v * cw..v * cw + c]);
    });
    out
}

/// Pointwise fuse map (c+1 → c) over the scattered volume.
pub fn combine<T: Real>(p: &ParamStore<T>, fuse: &Linear, volume: &Tensor4<T>) -> Result<Tensor4<T>> {
    if volume.channels() != fuse.cin {
        return Err(NnError::Config(format!(
            "fuse map takes {} channels, volume has {}",
            fuse.cin,
            volume.channels()
        )));
    }
    Ok(volume.with_channels(fuse.cout, fuse.forward(p, volume.data())))
}
