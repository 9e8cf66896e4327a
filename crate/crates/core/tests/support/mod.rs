//! Oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use mutomo_core::mlem::{mlem_reconstruct, MlemConfig};
use mutomo_core::phantom::{generate_phantom, GridSpec, MaterialLibrary, PhantomConfig};
use mutomo_core::poca::closest_approach;
use mutomo_core::raytrace::{voxel_path, Ray};
use mutomo_core::simulator::{simulate_event_set, SimConfig};
use mutomo_core::{MuonEvent, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Double-double arithmetic: enough headroom to resolve the quadratic's
// minimum to well below 1e-6 cm even when the lines are 100 cm apart.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    fn from(a: f64) -> Dd {
        Dd(a, 0.0)
    }

    fn add(self, o: Dd) -> Dd {
        let s = self.0 + o.0;
        let bb = s - self.0;
        let err = (self.0 - (s - bb)) + (o.0 - bb);
        let lo = err + self.1 + o.1;
        let hi = s + lo;
        Dd(hi, lo - (hi - s))
    }

    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let err = self.0.mul_add(o.0, -p);
        let lo = err + self.0 * o.1 + self.1 * o.0;
        let hi = p + lo;
        Dd(hi, lo - (hi - p))
    }

    fn lt(self, o: Dd) -> bool {
        self.0 < o.0 || (self.0 == o.0 && self.1 < o.1)
    }
}

fn sq_gap(o0: Vec3, d0: Vec3, o1: Vec3, d1: Vec3, t: f64, s: f64) -> Dd {
    let mut acc = Dd::from(0.0);
    for a in 0..3 {
        let r = Dd::from(o0[a])
            .add(Dd::from(t).mul(Dd::from(d0[a])))
            .add(Dd::from(o1[a]).neg())
            .add(Dd::from(s).mul(Dd::from(d1[a])).neg());
        acc = acc.add(r.mul(r));
    }
    acc
}

/// Nested grid search for argmin |o0 + t d0 − o1 − s d1|².
pub fn grid_search(o0: Vec3, d0: Vec3, o1: Vec3, d1: Vec3) -> (f64, f64) {
    const N: i32 = 20;
    let (mut tc, mut sc) = (0.0, 0.0);
    let mut half = 4000.0;
    while half > 1e-10 {
        let step = half / N as f64;
        let mut best = (tc, sc, sq_gap(o0, d0, o1, d1, tc, sc));
        for i in -N..=N {
            for j in -N..=N {
                let t = tc + i as f64 * step;
                let s = sc + j as f64 * step;
                let f = sq_gap(o0, d0, o1, d1, t, s);
                if f.lt(best.2) {
                    best = (t, s, f);
                }
            }
        }
        tc = best.0;
        sc = best.1;
        half = 6.0 * step;
    }
    (tc, sc)
}

pub fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

pub fn boundary_point(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    let mut p = [0.0; 3];
    for c in p.iter_mut() {
        *c = rng.random_range(-half..half);
    }
    let face = rng.random_range(0..3);
    p[face] = if rng.random::<bool>() { half } else { -half };
    Vec3::from_array(p)
}

pub fn random_events(rng: &mut ChaCha8Rng, n: usize) -> Vec<MuonEvent> {
    (0..n)
        .map(|_| {
            let through = Vec3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
            let d0 = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -1.0).normalized();
            let kick = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0);
            let df = (d0 + kick).normalized();
            let p = rng.random_range(800.0..5000.0);
            MuonEvent {
                entry_position: through + d0 * ((100.0 - through.z) / d0.z),
                exit_position: through + df * ((-100.0 - through.z) / df.z),
                entry_direction: d0,
                exit_direction: df,
                momentum: p,
                true_momentum: p,
            }
        })
        .collect()
}

/// Worst distance in cm between `closest_approach` and the grid-search
/// midpoint over `n` random non-parallel line pairs.
pub fn closest_approach_worst(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < n {
        let o0 = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let o1 = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let d0 = unit(&mut rng);
        let d1 = unit(&mut rng);
        // keep the minimizer well inside the search window
        if d0.cross(d1).norm() < 0.2 {
            continue;
        }
        let (t, s) = grid_search(o0, d0, o1, d1);
        let oracle = ((o0 + d0 * t) + (o1 + d1 * s)) * 0.5;
        let got = closest_approach(&Ray::new(o0, d0), &Ray::new(o1, d1));
        worst = worst.max((got.point - oracle).norm());
        checked += 1;
    }
    worst
}

/// Worst relative gap between summed segment lengths and chord length over
/// `n` random boundary-to-boundary chords. Panics on segments that repeat a
/// voxel, have no length or sit outside the voxel they name.
pub fn chord_tiling_worst(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let r = [1, 2, 3, 5, 8, 16, 17, 64][i % 8];
        let spec = GridSpec::new(r, 100.0).unwrap();
        let a = boundary_point(&mut rng, 50.0);
        let b = boundary_point(&mut rng, 50.0);
        let chord = (b - a).norm();
        let segs = voxel_path(a, b, &spec);
        let total: f64 = segs.iter().map(|s| s.length).sum();
        worst = worst.max((total - chord).abs() / chord);
        let dir = (b - a) / chord;
        let mut t = 0.0;
        for w in segs.windows(2) {
            assert_ne!(w[0].voxel, w[1].voxel);
        }
        for s in &segs {
            assert!(s.length > 0.0);
            // the midpoint of each segment sits in the voxel it is attributed to
            let mid = a + dir * (t + 0.5 * s.length);
            let c = spec.voxel_center(s.voxel);
            let h = 0.5 * spec.voxel_size() + 1e-6;
            assert!((0..3).all(|k| (mid[k] - c[k]).abs() <= h), "segment {s:?} off its voxel");
            t += s.length;
        }
    }
    worst
}

/// Number of MLEM iterations, over `instances` random 8³ phantoms with
/// simulated muons, at which the log-likelihood went down.
pub fn mlem_likelihood_decreases(instances: u64, dosage: usize) -> usize {
    let lib = MaterialLibrary::default();
    let phantom_cfg = PhantomConfig { resolution: 8, ..PhantomConfig::default() };
    let cfg = MlemConfig { max_iterations: 30, tolerance: 1e-15, ..MlemConfig::default() };
    (0..instances)
        .map(|i| {
            let phantom = generate_phantom(900 + i, &phantom_cfg, 100.0, &lib).unwrap();
            let events = simulate_event_set(&phantom, dosage, &SimConfig::default(), 900 + i).unwrap();
            let res = mlem_reconstruct(&events, 100.0, &cfg).unwrap();
            res.history.windows(2).filter(|w| w[1] < w[0]).count()
        })
        .sum()
}
