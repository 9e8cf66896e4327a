//! Straight-line geometry against the voxel grid: rays, box clipping and
//! Siddon-style decomposition of a chord into per-voxel path lengths.

use serde::{Deserialize, Serialize};

use crate::phantom::GridSpec;
use crate::vec3::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray { origin, direction: direction.normalized() }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Parameter interval over which the (infinite) line lies inside the
    /// axis-aligned cube `[-half, half]³`, or `None` if it misses.
    pub fn clip_cube(&self, half: f64) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = self.origin[a];
            let d = self.direction[a];
            if d == 0.0 {
                if o < -half || o > half {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-half - o) / d, (half - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSegment {
    pub voxel: [usize; 3],
    /// Chord length inside the voxel, cm.
    pub length: f64,
}

/// Decompose the chord `entry → exit` into ordered per-voxel segments.
///
/// All axis-plane crossings are merged into one sorted parameter list, so the
/// segment lengths telescope to the chord length. Slivers produced by
/// near-coincident crossings (ray through an edge or corner) are folded into
/// their neighbour so every returned voxel is distinct and every length is
/// positive.
pub fn voxel_path(entry: Vec3, exit: Vec3, grid: &GridSpec) -> Vec<PathSegment> {
    let delta = exit - entry;
    let chord = delta.norm();
    if !(chord > 0.0) {
        return Vec::new();
    }
    let r = grid.resolution;
    let l = grid.voxel_size();
    let h = grid.half_extent();

    let mut alphas = Vec::with_capacity(3 * (r + 1) + 2);
    alphas.push(0.0);
    alphas.push(1.0);
    for a in 0..3 {
        let d = delta[a];
        if d == 0.0 {
            continue;
        }
        for m in 0..=r {
            let plane = -h + m as f64 * l;
            let alpha = (plane - entry[a]) / d;
            if alpha > 0.0 && alpha < 1.0 {
                alphas.push(alpha);
            }
        }
    }
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();

    let sliver = 1e-9 * l / chord;
    let mut segments: Vec<PathSegment> = Vec::with_capacity(alphas.len());
    let mut carry = 0.0;
    for w in alphas.windows(2) {
        let (a0, a1) = (w[0], w[1]);
        let length = (a1 - a0) * chord;
        if a1 - a0 < sliver {
            match segments.last_mut() {
                Some(last) => last.length += length,
                None => carry += length,
            }
            continue;
        }
        let mid = entry + delta * (0.5 * (a0 + a1));
        let voxel = grid.voxel_of_clamped(mid);
        match segments.last_mut() {
            Some(last) if last.voxel == voxel => last.length += length,
            _ => {
                segments.push(PathSegment { voxel, length: length + carry });
                carry = 0.0;
            }
        }
    }
    if carry > 0.0 {
        // Entire chord below sliver size: one voxel.
        segments.push(PathSegment { voxel: grid.voxel_of_clamped(entry + delta * 0.5), length: carry });
    }
    segments
}

/// Voxel segments of the straight chord of `ray` through the grid cube.
pub fn ray_path(ray: &Ray, grid: &GridSpec) -> Vec<PathSegment> {
    match ray.clip_cube(grid.half_extent()) {
        Some((t0, t1)) => voxel_path(ray.at(t0), ray.at(t1), grid),
        None => Vec::new(),
    }
}

/// The voxel a particle at `position` moving along `direction` is about to
/// traverse, and the distance to that voxel's far boundary. `None` once the
/// particle has left the cube.
pub fn next_segment(position: Vec3, direction: Vec3, grid: &GridSpec) -> Option<PathSegment> {
    let l = grid.voxel_size();
    let probe = position + direction * (1e-9 * l);
    let voxel = grid.voxel_of(probe)?;
    let h = grid.half_extent();
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let d = direction[a];
        if d == 0.0 {
            continue;
        }
        let lo = -h + voxel[a] as f64 * l;
        let bound = if d > 0.0 { lo + l } else { lo };
        t_exit = t_exit.min((bound - position[a]) / d);
    }
    Some(PathSegment { voxel, length: t_exit.max(0.0) })
}
