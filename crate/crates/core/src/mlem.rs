//! Maximum-likelihood reconstruction under the Gaussian scattering model,
//! using only the two projected scattering angles of each muon.
//!
//! For muon i with per-voxel path lengths L_ij and momentum ratio
//! p_r = p₀/p̂, each projected angle is N(0, σ_i²) with
//! σ_i² = p_r² Σ_j L_ij λ_j. The update is the angle-only EM fixed point
//!
//! ```text
//! λ_j ← λ_j + λ_j² / (2 M_j) · Σ_{i∈I_j} p_r² L_ij (D_i/σ_i⁴ − 2/σ_i²)
//! ```
//!
//! with D_i = θx² + θy² and M_j the number of tracks through voxel j,
//! floored at `lambda_floor` and step-halved until the log-likelihood does
//! not decrease.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{GridSpec, VoxelGrid};
use crate::poca::{closest_approach, PocaKind};
use crate::raytrace::{ray_path, voxel_path};
use crate::simulator::{MuonEvent, P0};

pub use crate::raytrace::{PathSegment, Ray};

const CHUNK: usize = 256;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlemConfig {
    pub max_iterations: usize,
    /// Stop when the relative log-likelihood change falls below this.
    pub tolerance: f64,
    /// cm⁻¹.
    pub lambda_floor: f64,
    pub resolution: usize,
    /// Uniform starting density, cm⁻¹.
    pub initial_lambda: f64,
    /// Reference momentum, MeV/c.
    pub p0: f64,
}

impl Default for MlemConfig {
    fn default() -> Self {
        MlemConfig {
            max_iterations: 50,
            tolerance: 1e-7,
            lambda_floor: 1e-6,
            resolution: 8,
            initial_lambda: 1.0 / 36.08,
            p0: P0,
        }
    }
}

impl MlemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_floor > 0.0 && self.tolerance > 0.0 && self.initial_lambda > 0.0 && self.p0 > 0.0) {
            return Err(Error::Config(format!("invalid MLEM configuration {self:?}")));
        }
        if self.resolution == 0 {
            return Err(Error::Config("MLEM resolution must be at least 1".into()));
        }
        Ok(())
    }
}

/// One muon reduced to what the likelihood needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    /// (voxel index, path length) sorted by voxel index, voxels distinct.
    pub path: Vec<(usize, f64)>,
    /// (p₀/p̂)².
    pub momentum_ratio_sq: f64,
    /// θx² + θy² in the incoming-direction frame.
    pub angle_sq: f64,
}

impl Track {
    pub fn variance(&self, lambda: &[f64]) -> f64 {
        self.momentum_ratio_sq * self.path.iter().map(|&(j, l)| l * lambda[j]).sum::<f64>()
    }

    /// −log σ² − D/(2σ²): both projected angles, constants dropped.
    pub fn log_likelihood(&self, lambda: &[f64]) -> f64 {
        let var = self.variance(lambda);
        -var.ln() - self.angle_sq / (2.0 * var)
    }
}

/// Projected scattering angles (θx, θy) of the outgoing direction in the
/// frame of the incoming one.
pub fn projected_angles(event: &MuonEvent) -> (f64, f64) {
    let d0 = event.entry_direction;
    let df = event.exit_direction;
    let (u, v) = d0.transverse_basis();
    let along = df.dot(d0);
    (df.dot(u).atan2(along), df.dot(v).atan2(along))
}

/// Path of the muon through the grid: the broken line through its PoCA when
/// that lies inside the cube, otherwise the straight incoming chord.
pub fn track_path(event: &MuonEvent, spec: &GridSpec) -> Vec<PathSegment> {
    let incoming = event.incoming();
    let outgoing = event.outgoing();
    let half = spec.half_extent();
    let poca = closest_approach(&incoming, &outgoing);
    if poca.kind != PocaKind::Parallel && spec.contains(poca.point) {
        if let (Some((t_in, _)), Some((_, t_out))) = (incoming.clip_cube(half), outgoing.clip_cube(half)) {
            let mut segs = voxel_path(incoming.at(t_in), poca.point, spec);
            segs.extend(voxel_path(poca.point, outgoing.at(t_out), spec));
            return segs;
        }
    }
    ray_path(&incoming, spec)
}

pub fn prepare_track(event: &MuonEvent, spec: &GridSpec, p0: f64) -> Option<Track> {
    let segs = track_path(event, spec);
    if segs.is_empty() {
        return None;
    }
    let mut path: Vec<(usize, f64)> = segs.iter().map(|s| (spec.index(s.voxel), s.length)).collect();
    path.sort_by_key(|&(j, _)| j);
    path.dedup_by(|next, prev| {
        if next.0 == prev.0 {
            prev.1 += next.1;
            true
        } else {
            false
        }
    });
    let (tx, ty) = projected_angles(event);
    let ratio = p0 / event.momentum;
    Some(Track { path, momentum_ratio_sq: ratio * ratio, angle_sq: tx * tx + ty * ty })
}

/// Tracks for every event whose path crosses the cube.
pub fn prepare_tracks(events: &[MuonEvent], spec: &GridSpec, p0: f64) -> Vec<Track> {
    events.par_iter().filter_map(|e| prepare_track(e, spec, p0)).collect()
}

fn chunked_sum(tracks: &[Track], f: impl Fn(&Track) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = tracks.par_chunks(CHUNK).map(|c| c.iter().map(&f).sum::<f64>()).collect();
    partial.iter().sum()
}

fn chunked_voxel_sum(tracks: &[Track], n: usize, f: impl Fn(&Track, &mut [f64]) + Sync) -> Vec<f64> {
    let partial: Vec<Vec<f64>> = tracks
        .par_chunks(CHUNK)
        .map(|c| {
            let mut acc = vec![0.0; n];
            for t in c {
                f(t, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n];
    for p in partial {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

pub fn tracks_log_likelihood(tracks: &[Track], lambda: &[f64]) -> f64 {
    chunked_sum(tracks, |t| t.log_likelihood(lambda))
}

/// ∂ log L / ∂λ_j.
pub fn tracks_gradient(tracks: &[Track], lambda: &[f64]) -> Vec<f64> {
    chunked_voxel_sum(tracks, lambda.len(), |t, acc| {
        let var = t.variance(lambda);
        let w = t.momentum_ratio_sq * (t.angle_sq / (2.0 * var * var) - 1.0 / var);
        for &(j, l) in &t.path {
            acc[j] += w * l;
        }
    })
}

/// Log-likelihood of `events` given the densities in `grid`, summed over
/// events whose track crosses the cube.
pub fn log_likelihood(grid: &VoxelGrid, events: &[MuonEvent], p0: f64) -> f64 {
    let tracks = prepare_tracks(events, &grid.spec(), p0);
    tracks_log_likelihood(&tracks, grid.values())
}

pub fn log_likelihood_gradient(grid: &VoxelGrid, events: &[MuonEvent], p0: f64) -> Vec<f64> {
    let tracks = prepare_tracks(events, &grid.spec(), p0);
    tracks_gradient(&tracks, grid.values())
}

/// The raw (unfloored, full-step) EM increment for every voxel.
pub fn em_increment(tracks: &[Track], lambda: &[f64], hits: &[usize]) -> Vec<f64> {
    let grad = tracks_gradient(tracks, lambda);
    grad.iter()
        .zip(lambda)
        .zip(hits)
        .map(|((&g, &l), &m)| if m > 0 { l * l * g / m as f64 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MlemResult {
    pub grid: VoxelGrid,
    /// Log-likelihood of the initial guess followed by every accepted iterate.
    pub history: Vec<f64>,
    /// Every iterate, initial guess first.
    pub iterates: Vec<Vec<f64>>,
}

/// Run MLEM from a uniform start. Every accepted iterate has a
/// log-likelihood at least that of its predecessor.
pub fn mlem_reconstruct(events: &[MuonEvent], extent: f64, config: &MlemConfig) -> Result<MlemResult> {
    config.validate()?;
    let spec = GridSpec::new(config.resolution, extent)?;
    let tracks = prepare_tracks(events, &spec, config.p0);
    if tracks.is_empty() {
        return Err(Error::NoData("no muon track crosses the reconstruction volume".into()));
    }
    let start = vec![config.initial_lambda.max(config.lambda_floor); spec.len()];
    mlem_iterate(&tracks, spec, start, config)
}

/// MLEM from an explicit starting image over pre-computed tracks.
pub fn mlem_iterate(tracks: &[Track], spec: GridSpec, start: Vec<f64>, config: &MlemConfig) -> Result<MlemResult> {
    if start.len() != spec.len() {
        return Err(Error::ShapeMismatch(format!("{} start values for {} voxels", start.len(), spec.len())));
    }
    let mut hits = vec![0usize; spec.len()];
    for t in tracks {
        for &(j, _) in &t.path {
            hits[j] += 1;
        }
    }
    let floor = config.lambda_floor;
    let mut lambda: Vec<f64> = start.into_iter().map(|v| v.max(floor)).collect();
    let mut ll = tracks_log_likelihood(tracks, &lambda);
    let mut history = vec![ll];
    let mut iterates = vec![lambda.clone()];
    for _ in 0..config.max_iterations {
        let step = em_increment(tracks, &lambda, &hits);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate: Vec<f64> = lambda.iter().zip(&step).map(|(&l, &d)| (l + alpha * d).max(floor)).collect();
            let cand_ll = tracks_log_likelihood(tracks, &candidate);
            if cand_ll >= ll {
                accepted = Some((candidate, cand_ll));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, next_ll)) = accepted else { break };
        let rel = (next_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        ll = next_ll;
        history.push(ll);
        iterates.push(lambda.clone());
        if rel < config.tolerance {
            break;
        }
    }
    let grid = VoxelGrid::from_values(spec.resolution, spec.extent, lambda)?;
    Ok(MlemResult { grid, history, iterates })
}
