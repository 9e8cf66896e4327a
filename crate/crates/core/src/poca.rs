//! Point of closest approach and the direct-allocation PoCA baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::phantom::{GridSpec, VoxelGrid};
use crate::raytrace::Ray;
use crate::simulator::{MuonEvent, P0};
use crate::vec3::Vec3;

/// Default scattered-or-not threshold on the scattering angle, rad.
pub const DEFAULT_SCATTER_THRESHOLD: f64 = 2e-3;

const PARALLEL_EPS: f64 = 1e-12;
const INTERSECT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PocaKind {
    Skew,
    Intersecting,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PocaResult {
    pub point: Vec3,
    /// Distance between the two lines, cm.
    pub gap: f64,
    pub kind: PocaKind,
}

/// Midpoint of the common perpendicular of the two (infinite) lines.
///
/// For parallel lines the point on the incoming line closest to the
/// outgoing origin is returned.
pub fn closest_approach(incoming: &Ray, outgoing: &Ray) -> PocaResult {
    let d0 = incoming.direction;
    let d1 = outgoing.direction;
    let w = incoming.origin - outgoing.origin;
    let cross = d0.cross(d1);
    let denom = cross.dot(cross);
    if cross.norm() < PARALLEL_EPS {
        let t = (outgoing.origin - incoming.origin).dot(d0);
        let point = incoming.at(t);
        let gap = (point - outgoing.origin).norm();
        return PocaResult { point, gap, kind: PocaKind::Parallel };
    }
    let b = d0.dot(d1);
    let d = d0.dot(w);
    let e = d1.dot(w);
    let t = (b * e - d) / denom;
    let s = (e - b * d) / denom;
    let p = incoming.at(t);
    let q = outgoing.at(s);
    let gap = (p - q).norm();
    let kind = if gap <= INTERSECT_EPS { PocaKind::Intersecting } else { PocaKind::Skew };
    PocaResult { point: (p + q) * 0.5, gap, kind }
}

/// Scattering angle (rad) and the chord |p̂_f − p̂₀|.
pub fn scattering_angle(event: &MuonEvent) -> (f64, f64) {
    let cos = event.entry_direction.dot(event.exit_direction).clamp(-1.0, 1.0);
    (cos.acos(), event.chord())
}

/// Length of the single-scatter track inside the cube: incoming line from
/// its cube entry to the PoCA, then outgoing line from the PoCA to its cube
/// exit.
pub fn broken_track_length(event: &MuonEvent, poca: Vec3, half: f64) -> Option<f64> {
    let (t_in, _) = event.incoming().clip_cube(half)?;
    let (_, t_out) = event.outgoing().clip_cube(half)?;
    let entry = event.incoming().at(t_in);
    let exit = event.outgoing().at(t_out);
    let length = (poca - entry).norm() + (exit - poca).norm();
    (length > 0.0).then_some(length)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PocaConfig {
    pub resolution: usize,
    /// Minimum scattering angle for an event to be allocated, rad.
    pub scatter_threshold: f64,
    /// Reference momentum, MeV/c.
    pub p0: f64,
}

impl Default for PocaConfig {
    fn default() -> Self {
        PocaConfig { resolution: 16, scatter_threshold: DEFAULT_SCATTER_THRESHOLD, p0: P0 }
    }
}

/// Voxel allocation of one event, if it scatters inside the cube.
///
/// The allocated value is the per-plane squared angle scaled to the
/// reference momentum, per unit of track length: (θ p̂ / p₀)² / (2 L).
pub fn poca_allocation(event: &MuonEvent, spec: &GridSpec, config: &PocaConfig) -> Option<(usize, f64)> {
    let (theta, _) = scattering_angle(event);
    if !(theta > config.scatter_threshold) {
        return None;
    }
    let poca = closest_approach(&event.incoming(), &event.outgoing());
    let voxel = spec.voxel_of(poca.point)?;
    let length = broken_track_length(event, poca.point, spec.half_extent()).unwrap_or(spec.voxel_size());
    let scaled = theta * event.momentum / config.p0;
    Some((spec.index(voxel), scaled * scaled / (2.0 * length)))
}

/// Direct PoCA reconstruction over the object cube of side `extent`.
///
/// Each voxel holds the mean of the values allocated to it; voxels without
/// allocations are zero. Contributions are summed in (voxel, value) order so
/// the result is bit-identical under any permutation of `events`.
pub fn poca_reconstruct(events: &[MuonEvent], extent: f64, config: &PocaConfig) -> Result<VoxelGrid> {
    let spec = GridSpec::new(config.resolution, extent)?;
    let mut contributions: Vec<(usize, f64)> =
        events.par_iter().filter_map(|e| poca_allocation(e, &spec, config)).collect();
    contributions.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut sums = vec![0.0; spec.len()];
    let mut counts = vec![0usize; spec.len()];
    for (idx, value) in contributions {
        sums[idx] += value;
        counts[idx] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    VoxelGrid::from_values(config.resolution, extent, values)
}
