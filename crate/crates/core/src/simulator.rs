//! Cosmic-muon Monte Carlo: beam sampling, multiple Coulomb scattering
//! through the voxel phantom and the detector read-out model.
//!
//! Muons start on the upper detector plane, fly straight to the object
//! cube, take one Gaussian scattering kick per voxel segment they cross and
//! fly straight again to the lower plane. Energy loss is ignored, so the
//! momentum is constant along the track, and v = c.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::VoxelGrid;
use crate::raytrace::{next_segment, Ray};
use crate::vec3::Vec3;

/// Scattering energy constant of the Gaussian width formula, MeV.
pub const E_S: f64 = 21.0;
/// Reference momentum of the scattering-density normalization, MeV.
pub const P0: f64 = 15.0;
/// Lowest reportable momentum estimate, MeV.
pub const MIN_MOMENTUM_ESTIMATE: f64 = 100.0;

const MAX_SAMPLE_ATTEMPTS: usize = 200_000;
const MAX_TRANSPORT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    /// Side of the object cube centred at the origin, cm.
    pub object_side: f64,
    /// Half side of the square detector planes, cm.
    pub detector_half_side: f64,
    /// Distance between the object cube faces and the inner detector planes, cm.
    pub detector_gap: f64,
    /// Spacing of the two pixel planes forming each detector side, cm.
    pub plane_separation: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { object_side: 100.0, detector_half_side: 100.0, detector_gap: 50.0, plane_separation: 10.0 }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.object_side, self.detector_half_side, self.detector_gap, self.plane_separation]
            .iter()
            .all(|&v| v > 0.0 && v.is_finite());
        if !all_positive {
            return Err(Error::Config(format!("geometry lengths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// z of the inner upper detector plane; the lower plane sits at `-upper_z`.
    pub fn upper_z(&self) -> f64 {
        0.5 * self.object_side + self.detector_gap
    }

    pub fn half_object(&self) -> f64 {
        0.5 * self.object_side
    }

    pub fn on_detector(&self, p: Vec3) -> bool {
        p.x.abs() <= self.detector_half_side && p.y.abs() <= self.detector_half_side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    /// Exponent γ of the momentum spectrum p^-γ.
    pub momentum_exponent: f64,
    /// MeV.
    pub p_min: f64,
    /// MeV.
    pub p_max: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { momentum_exponent: 2.7, p_min: 500.0, p_max: 100_000.0 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_min > 0.0 && self.p_max > self.p_min && self.momentum_exponent > 1.0) {
            return Err(Error::Config(format!("invalid beam configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Pixels along each side of a detector plane; `None` is ideal resolution.
    pub pixels_per_side: Option<u32>,
    /// Relative half-width Δp of the uniform momentum-estimate error.
    pub momentum_error: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { pixels_per_side: None, momentum_error: 0.2 }
    }
}

impl DetectorConfig {
    pub fn ideal() -> Self {
        DetectorConfig { pixels_per_side: None, momentum_error: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_side == Some(0) {
            return Err(Error::Config("pixels_per_side must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum_error) {
            return Err(Error::Config(format!("momentum error {} outside [0, 1]", self.momentum_error)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub beam: BeamConfig,
    pub detector: DetectorConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.beam.validate()?;
        self.detector.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuonState {
    pub position: Vec3,
    pub direction: Vec3,
    /// MeV/c.
    pub momentum: f64,
}

/// Exact track state at the two inner detector planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueEvent {
    pub entry: MuonState,
    pub exit: MuonState,
}

/// One detected muon as the reconstruction algorithms see it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuonEvent {
    pub entry_position: Vec3,
    pub exit_position: Vec3,
    pub entry_direction: Vec3,
    pub exit_direction: Vec3,
    /// Momentum estimate, MeV/c.
    pub momentum: f64,
    /// Simulation truth, never used by reconstructors.
    pub true_momentum: f64,
}

impl MuonEvent {
    pub fn incoming(&self) -> Ray {
        Ray { origin: self.entry_position, direction: self.entry_direction }
    }

    pub fn outgoing(&self) -> Ray {
        Ray { origin: self.exit_position, direction: self.exit_direction }
    }

    /// |p̂_f − p̂₀|, the chord between the unit directions.
    pub fn chord(&self) -> f64 {
        (self.exit_direction - self.entry_direction).norm()
    }
}

/// Zenith angle with pdf ∝ cos²θ per unit solid angle on the downward
/// hemisphere: cos³θ is uniform.
pub fn sample_zenith(rng: &mut impl Rng) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    u.cbrt().acos()
}

/// Momentum from the truncated power law p^-γ on [p_min, p_max].
pub fn sample_momentum(rng: &mut impl Rng, beam: &BeamConfig) -> f64 {
    let g = 1.0 - beam.momentum_exponent;
    let (lo, hi) = (beam.p_min.powf(g), beam.p_max.powf(g));
    let u: f64 = rng.random();
    (lo + u * (hi - lo)).powf(1.0 / g).clamp(beam.p_min, beam.p_max)
}

/// Draw a muon on the upper detector whose straight extension also crosses
/// the lower detector square.
pub fn sample_muon(rng: &mut impl Rng, beam: &BeamConfig, geom: &Geometry) -> Result<MuonState> {
    let z = geom.upper_z();
    let w = geom.detector_half_side;
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let x = rng.random_range(-w..=w);
        let y = rng.random_range(-w..=w);
        let theta = sample_zenith(rng);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (st, ct) = theta.sin_cos();
        if ct <= 0.0 {
            continue;
        }
        let direction = Vec3::new(st * phi.cos(), st * phi.sin(), -ct);
        let position = Vec3::new(x, y, z);
        let t = 2.0 * z / ct;
        if geom.on_detector(position + direction * t) {
            let momentum = sample_momentum(rng, beam);
            return Ok(MuonState { position, direction, momentum });
        }
    }
    Err(Error::Config(format!(
        "muon acceptance below 1 in {MAX_SAMPLE_ATTEMPTS}: detector geometry inconsistent"
    )))
}

/// Plane-angle standard deviation after a path `x` (cm) through density
/// `lambda` (cm⁻¹) at momentum `p` (MeV/c).
pub fn scattering_sigma(p: f64, x: f64, lambda: f64) -> f64 {
    (E_S * E_S / (2.0 * p * p) * x * lambda).sqrt()
}

/// Apply the Gaussian multiple-scattering kick of one segment of length `x`
/// ending at `state.position`: correlated (displacement, angle) pairs in two
/// transverse planes.
pub fn step_scatter(state: &MuonState, x: f64, lambda: f64, rng: &mut impl Rng) -> MuonState {
    let sigma = scattering_sigma(state.momentum, x, lambda);
    if !(sigma > 0.0) {
        return *state;
    }
    let (u, v) = state.direction.transverse_basis();
    let mut kick = |axis: Vec3| -> (Vec3, Vec3) {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let theta = z2 * sigma;
        let shift = x * sigma * (z1 / 12f64.sqrt() + z2 / 2.0);
        (axis * theta.tan(), axis * shift)
    };
    let (du, su) = kick(u);
    let (dv, sv) = kick(v);
    MuonState {
        position: state.position + su + sv,
        direction: (state.direction + du + dv).normalized(),
        momentum: state.momentum,
    }
}

/// Transport a sampled muon through the phantom to the lower detector plane.
/// Returns `Ok(None)` when the track misses the lower detector square.
pub fn transport(
    state: &MuonState,
    grid: &VoxelGrid,
    geom: &Geometry,
    rng: &mut impl Rng,
) -> Result<Option<TrueEvent>> {
    if (grid.extent() - geom.object_side).abs() > 1e-9 * geom.object_side {
        return Err(Error::Config(format!(
            "phantom extent {} cm differs from object side {} cm",
            grid.extent(),
            geom.object_side
        )));
    }
    let spec = grid.spec();
    let mut cur = *state;
    let ray = Ray { origin: cur.position, direction: cur.direction };
    if let Some((t0, _)) = ray.clip_cube(spec.half_extent()) {
        if t0 > 0.0 {
            cur.position = ray.at(t0);
        }
        let max_steps = 64 * spec.resolution + 1024;
        let min_step = 1e-9 * spec.voxel_size();
        for _ in 0..max_steps {
            let Some(seg) = next_segment(cur.position, cur.direction, &spec) else { break };
            let length = seg.length.max(min_step);
            cur.position += cur.direction * length;
            let lambda = grid.get(seg.voxel);
            if lambda > 0.0 {
                cur = step_scatter(&cur, length, lambda, rng);
            }
        }
    }
    let lower_z = -geom.upper_z();
    if cur.direction.z >= 0.0 || cur.position.z < lower_z {
        return Ok(None);
    }
    let t = (lower_z - cur.position.z) / cur.direction.z;
    let mut exit = cur;
    exit.position = cur.position + cur.direction * t;
    exit.position.z = lower_z;
    if !geom.on_detector(exit.position) {
        return Ok(None);
    }
    Ok(Some(TrueEvent { entry: *state, exit }))
}

fn snap(coord: f64, cell: f64, half: f64) -> f64 {
    -half + ((coord + half) / cell).floor() * cell + 0.5 * cell
}

fn snap_xy(p: Vec3, cell: f64, half: f64) -> Vec3 {
    Vec3::new(snap(p.x, cell, half), snap(p.y, cell, half), p.z)
}

/// Detector read-out: pixel quantization on two planes per side and the
/// multiplicative momentum-estimate error.
pub fn detect(truth: &TrueEvent, det: &DetectorConfig, geom: &Geometry, rng: &mut impl Rng) -> MuonEvent {
    let u: f64 = rng.random();
    let error = det.momentum_error * (2.0 * u - 1.0);
    let p = truth.entry.momentum;
    let momentum = (p * (1.0 + error)).max(MIN_MOMENTUM_ESTIMATE);

    let (entry_position, entry_direction, exit_position, exit_direction) = match det.pixels_per_side {
        None => (truth.entry.position, truth.entry.direction, truth.exit.position, truth.exit.direction),
        Some(n) => {
            let half = geom.detector_half_side;
            let cell = 2.0 * half / f64::from(n);
            let sep = geom.plane_separation;
            let d0 = truth.entry.direction;
            let outer_in = truth.entry.position - d0 * (sep / d0.z.abs());
            let df = truth.exit.direction;
            let outer_out = truth.exit.position + df * (sep / df.z.abs());
            let inner_in = snap_xy(truth.entry.position, cell, half);
            let inner_out = snap_xy(truth.exit.position, cell, half);
            let outer_in = snap_xy(outer_in, cell, half);
            let outer_out = snap_xy(outer_out, cell, half);
            (inner_in, (inner_in - outer_in).normalized(), inner_out, (outer_out - inner_out).normalized())
        }
    };
    MuonEvent { entry_position, exit_position, entry_direction, exit_direction, momentum, true_momentum: p }
}

/// Per-event random streams: transport and detection draw from separate
/// ChaCha streams keyed by (master seed, event index), so the result does
/// not depend on scheduling and detector settings do not perturb the
/// underlying trajectories.
pub fn event_rngs(master_seed: u64, index: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut transport = ChaCha8Rng::seed_from_u64(master_seed);
    transport.set_stream(2 * index);
    let mut detection = ChaCha8Rng::seed_from_u64(master_seed);
    detection.set_stream(2 * index + 1);
    (transport, detection)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimulationStats {
    pub accepted: usize,
    /// Tracks lost off the lower detector and resampled.
    pub dropped: usize,
}

fn simulate_one(grid: &VoxelGrid, config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<(TrueEvent, usize)> {
    for dropped in 0..MAX_TRANSPORT_ATTEMPTS {
        let state = sample_muon(rng, &config.beam, &config.geometry)?;
        if let Some(ev) = transport(&state, grid, &config.geometry, rng)? {
            return Ok((ev, dropped));
        }
    }
    Err(Error::Config("every transported muon missed the lower detector".into()))
}

/// Exactly `dosage` true tracks, in event-index order.
pub fn simulate_true_events(
    grid: &VoxelGrid,
    dosage: usize,
    config: &SimConfig,
    master_seed: u64,
) -> Result<(Vec<TrueEvent>, SimulationStats)> {
    if dosage == 0 {
        return Err(Error::InvalidArgument("dosage must be at least 1".into()));
    }
    config.validate()?;
    let results: Vec<Result<(TrueEvent, usize)>> = (0..dosage as u64)
        .into_par_iter()
        .map(|i| {
            let (mut rng, _) = event_rngs(master_seed, i);
            simulate_one(grid, config, &mut rng)
        })
        .collect();
    let mut events = Vec::with_capacity(dosage);
    let mut stats = SimulationStats::default();
    for r in results {
        let (ev, dropped) = r?;
        events.push(ev);
        stats.dropped += dropped;
    }
    stats.accepted = events.len();
    Ok((events, stats))
}

/// Apply the detector model to true tracks produced with `master_seed`.
pub fn detect_events(truth: &[TrueEvent], det: &DetectorConfig, geom: &Geometry, master_seed: u64) -> Vec<MuonEvent> {
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (_, mut rng) = event_rngs(master_seed, i as u64);
            detect(t, det, geom, &mut rng)
        })
        .collect()
}

/// Simulate and detect exactly `dosage` muons through `grid`.
pub fn simulate_event_set(
    grid: &VoxelGrid,
    dosage: usize,
    config: &SimConfig,
    master_seed: u64,
) -> Result<Vec<MuonEvent>> {
    let (truth, _) = simulate_true_events(grid, dosage, config, master_seed)?;
    Ok(detect_events(&truth, &config.detector, &config.geometry, master_seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zenith_follows_cos_squared() {
        let mut r = rng(1);
        let n = 1_000_000;
        let below = (0..n).filter(|_| sample_zenith(&mut r) < 30f64.to_radians()).count();
        // ∫₀^{π/6} cos²θ sinθ dθ / ∫₀^{π/2} cos²θ sinθ dθ = 1 − cos³30°
        let expected = 1.0 - 30f64.to_radians().cos().powi(3);
        assert!((expected - 0.3505).abs() < 1e-4);
        assert!((below as f64 / n as f64 - expected).abs() < 0.01);
    }

    #[test]
    fn sampled_muons_reach_the_lower_detector() {
        let geom = Geometry::default();
        let beam = BeamConfig::default();
        let mut r = rng(2);
        for _ in 0..5000 {
            let m = sample_muon(&mut r, &beam, &geom).unwrap();
            assert_eq!(m.position.z, 100.0);
            assert!((m.direction.norm() - 1.0).abs() < 1e-12);
            let t = -200.0 / m.direction.z;
            let hit = m.position + m.direction * t;
            assert!(hit.x.abs() <= 100.0 && hit.y.abs() <= 100.0);
            assert!(m.momentum >= beam.p_min && m.momentum <= beam.p_max);
        }
    }

    #[test]
    fn vacuum_step_is_identity() {
        let s = MuonState {
            position: Vec3::new(1.0, 2.0, 3.0),
            direction: Vec3::new(0.6, 0.0, -0.8),
            momentum: 3000.0,
        };
        let mut r = rng(3);
        assert_eq!(step_scatter(&s, 10.0, 0.0, &mut r), s);
        assert_eq!(step_scatter(&s, 0.0, 1.0, &mut r), s);
    }

    fn plane_angle_variance(x: f64, n: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let s = MuonState { position: Vec3::ZERO, direction: Vec3::new(0.0, 0.0, -1.0), momentum: 3000.0 };
        let lambda = 1.0 / 1.757;
        let sum: f64 = (0..n)
            .map(|_| {
                let out = step_scatter(&s, x, lambda, &mut r);
                let (u, _) = s.direction.transverse_basis();
                let a = (out.direction.dot(u) / -out.direction.z).atan();
                a * a
            })
            .sum();
        sum / n as f64
    }

    #[test]
    fn iron_slab_rms_angle() {
        let expected = (21.0f64.powi(2) / (2.0 * 3000f64.powi(2)) * (10.0 / 1.757)).sqrt();
        assert!((expected - 0.0118).abs() < 5e-5);
        let rms = plane_angle_variance(10.0, 100_000, 4).sqrt();
        assert!((rms / expected - 1.0).abs() < 0.03, "rms {rms} vs {expected}");
    }

    #[test]
    fn variance_is_linear_in_thickness() {
        let v1 = plane_angle_variance(10.0, 100_000, 5);
        let v2 = plane_angle_variance(20.0, 100_000, 6);
        assert!((v2 / v1 / 2.0 - 1.0).abs() < 0.05, "ratio {}", v2 / v1);
    }

    #[test]
    fn empty_phantom_is_straight_line() {
        let grid = VoxelGrid::zeros(8, 100.0).unwrap();
        let geom = Geometry::default();
        let mut r = rng(7);
        for _ in 0..200 {
            let s = sample_muon(&mut r, &BeamConfig::default(), &geom).unwrap();
            let ev = transport(&s, &grid, &geom, &mut r).unwrap().expect("straight rays are accepted");
            assert_eq!(ev.exit.direction, s.direction);
            let t = -200.0 / s.direction.z;
            let straight = s.position + s.direction * t;
            assert!((ev.exit.position - straight).norm() < 1e-9);
        }
    }

    fn mean_angle(grid: &VoxelGrid, seed: u64) -> f64 {
        let cfg = SimConfig { detector: DetectorConfig::ideal(), ..SimConfig::default() };
        let events = simulate_event_set(grid, 10_000, &cfg, seed).unwrap();
        events.iter().map(|e| e.chord()).sum::<f64>() / events.len() as f64
    }

    #[test]
    fn dense_phantom_scatters_more() {
        let empty = VoxelGrid::zeros(4, 100.0).unwrap();
        let iron = VoxelGrid::filled(4, 100.0, 1.0 / 1.757).unwrap();
        assert_eq!(mean_angle(&empty, 8), 0.0);
        assert!(mean_angle(&iron, 8) > 0.01);
    }

    #[test]
    fn water_phantom_drop_rate() {
        let grid = VoxelGrid::filled(8, 100.0, 1.0 / 36.08).unwrap();
        let cfg = SimConfig::default();
        let (_, stats) = simulate_true_events(&grid, 20_000, &cfg, 9).unwrap();
        let frac = stats.dropped as f64 / (stats.dropped + stats.accepted) as f64;
        assert!(frac < 0.05, "drop fraction {frac}");
    }

    #[test]
    fn ideal_detector_reproduces_truth() {
        let grid = VoxelGrid::filled(4, 100.0, 0.5).unwrap();
        let (truth, _) = simulate_true_events(&grid, 100, &SimConfig::default(), 10).unwrap();
        let geom = Geometry::default();
        let det = DetectorConfig::ideal();
        for ev in detect_events(&truth, &det, &geom, 10).iter().zip(&truth) {
            let (d, t) = ev;
            assert_eq!(d.entry_position, t.entry.position);
            assert_eq!(d.exit_position, t.exit.position);
            assert_eq!(d.entry_direction, t.entry.direction);
            assert_eq!(d.exit_direction, t.exit.direction);
            assert_eq!(d.momentum, t.entry.momentum);
        }
    }

    #[test]
    fn pixel_quantization_lands_on_cell_centres() {
        let grid = VoxelGrid::filled(4, 100.0, 0.5).unwrap();
        let (truth, _) = simulate_true_events(&grid, 500, &SimConfig::default(), 11).unwrap();
        let geom = Geometry::default();
        let det = DetectorConfig { pixels_per_side: Some(64), momentum_error: 0.0 };
        for ev in detect_events(&truth, &det, &geom, 11) {
            for c in [ev.entry_position.x, ev.entry_position.y, ev.exit_position.x, ev.exit_position.y] {
                let k = (c + 100.0) / 1.5625;
                assert!((k - k.round()).abs() < 1e-9 && (k.round() as i64) % 2 == 1, "{c}");
            }
            assert!((ev.entry_direction.norm() - 1.0).abs() < 1e-9);
            assert!((ev.exit_direction.norm() - 1.0).abs() < 1e-9);
            assert!(ev.entry_direction.z < 0.0 && ev.exit_direction.z < 0.0);
        }
    }

    #[test]
    fn momentum_error_is_bounded() {
        let grid = VoxelGrid::zeros(2, 100.0).unwrap();
        let (truth, _) = simulate_true_events(&grid, 2000, &SimConfig::default(), 12).unwrap();
        let det = DetectorConfig { pixels_per_side: None, momentum_error: 0.2 };
        for ev in detect_events(&truth, &det, &Geometry::default(), 12) {
            assert!((ev.momentum / ev.true_momentum - 1.0).abs() <= 0.2 + 1e-12);
        }
    }

    #[test]
    fn event_sets_are_seed_deterministic() {
        let grid = VoxelGrid::filled(4, 100.0, 0.1).unwrap();
        let cfg = SimConfig::default();
        let a = simulate_event_set(&grid, 1024, &cfg, 5).unwrap();
        assert_eq!(a.len(), 1024);
        assert_eq!(a, simulate_event_set(&grid, 1024, &cfg, 5).unwrap());
        assert_ne!(a, simulate_event_set(&grid, 1024, &cfg, 6).unwrap());
        assert!(simulate_event_set(&grid, 0, &cfg, 5).is_err());
    }

    #[test]
    fn impossible_geometry_is_a_configuration_error() {
        let mut r = rng(13);
        let geom = Geometry { detector_half_side: 1e-6, detector_gap: 1e6, ..Geometry::default() };
        assert!(matches!(sample_muon(&mut r, &BeamConfig::default(), &geom), Err(Error::Config(_))));
    }
}
