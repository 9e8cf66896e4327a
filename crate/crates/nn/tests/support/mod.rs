//! Oracles shared by the nn integration tests and the acceptance harness:
//! central finite differences for every layer type, and the executable
//! forms of the scatter-operation theorems.
#![allow(dead_code)]

use mutomo_core::phantom::{generate_phantom, MaterialLibrary, PhantomConfig, VoxelGrid};
use mutomo_core::simulator::{simulate_event_set, SimConfig};
use mutomo_core::{GridSpec, MuonEvent, Vec3};
use mutomo_nn::convnext::ConvNextBlock;
use mutomo_nn::layers::{
    clamp_min0, clamp_min0_backward, concat, concat_backward, gelu, upsample2, upsample2_backward, DepthwiseConv,
    DownConv, LayerNorm, LayerScale, Linear,
};
use mutomo_nn::munet::{MuNet, MuNetConfig};
use mutomo_nn::params::{Grads, ParamStore, Registry};
use mutomo_nn::scatter::{featurize, place_events, scatter_backward, scatter_features, ScatterConfig, FEATURES};
use mutomo_nn::unet::{UNet, UNetConfig};
use mutomo_nn::Tensor4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-5;

pub fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Replace every parameter with N(0, std²) so that no branch is inert.
pub fn randomize(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Worst normwise relative error over every parameter tensor and the input,
/// for the linear functional L = Σ w·f(θ, x) with random weights w.
/// `backward` returns the input gradient, or `None` when the layer does not
/// propagate one.
pub fn check(
    rng: &mut ChaCha8Rng,
    params: &ParamStore<f64>,
    x: &[f64],
    forward: impl Fn(&ParamStore<f64>, &[f64]) -> Vec<f64>,
    backward: impl Fn(&ParamStore<f64>, &mut Grads<f64>, &[f64], &[f64]) -> Option<Vec<f64>>,
) -> f64 {
    let y = forward(params, x);
    let w = randn(rng, y.len(), 1.0);
    let loss = |p: &ParamStore<f64>, x: &[f64]| -> f64 { forward(p, x).iter().zip(&w).map(|(a, b)| a * b).sum() };
    let mut g = params.zero_grads();
    let dx = backward(params, &mut g, x, &w);

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for t in 0..params.tensors().len() {
        let mut numeric = vec![0.0; params.tensors()[t].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let v = params.tensors()[t][i];
            probe.tensors_mut()[t][i] = v + STEP;
            let up = loss(&probe, x);
            probe.tensors_mut()[t][i] = v - STEP;
            let down = loss(&probe, x);
            probe.tensors_mut()[t][i] = v;
            *slot = (up - down) / (2.0 * STEP);
        }
        let e = rel_err(&g.tensors()[t], &numeric);
        worst = worst.max(e);
    }
    if let Some(dx) = &dx {
        let mut xp = x.to_vec();
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                xp[i] = x[i] + STEP;
                let up = loss(params, &xp);
                xp[i] = x[i] - STEP;
                let down = loss(params, &xp);
                xp[i] = x[i];
                (up - down) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(rel_err(dx, &numeric));
    }
    // a suite that only ever compares zeros proves nothing
    if g.max_abs() == 0.0 && dx.as_ref().is_none_or(|d| d.iter().all(|&v| v == 0.0)) {
        return f64::INFINITY;
    }
    worst
}

/// Shift the head bias so most outputs sit above the clamp.
fn lift_head(p: &mut ParamStore<f64>, name: &str) {
    let id = p.id(name).unwrap();
    p.get_mut(id).fill(1.5);
}

fn tensor(shape: [usize; 4], x: &[f64]) -> Tensor4<f64> {
    Tensor4::new(shape, x.to_vec()).unwrap()
}

/// Inputs kept away from the kink of the clamp so differences stay smooth.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    randn(rng, n, 1.0).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v }).collect()
}

pub fn small_unet_config() -> UNetConfig {
    UNetConfig { blocks: vec![1, 1, 1], channels: vec![4, 5, 6], in_channels: 3, kernel: 3 }
}

pub fn small_munet_config() -> MuNetConfig {
    MuNetConfig {
        unet: UNetConfig { blocks: vec![1, 1], channels: vec![4, 5], in_channels: 4, kernel: 3 },
        scatter: ScatterConfig { resolution: 4, point_size: 3, channels: 4, ..ScatterConfig::default() },
        hidden: 5,
    }
}

pub fn iron_events(resolution: usize, dosage: usize, seed: u64) -> Vec<MuonEvent> {
    let lib = MaterialLibrary::default();
    let iron = lib.get("iron").unwrap().lambda();
    let grid = VoxelGrid::filled(resolution, 100.0, iron).unwrap();
    simulate_event_set(&grid, dosage, &SimConfig::default(), seed).unwrap()
}

/// (layer name, worst relative error) for every neural layer type and for
/// the composed block, U-Net and full model.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut out = Vec::new();

    {
        let mut reg = Registry::new();
        let lin = Linear::new(&mut reg, "lin", 3, 5);
        let mut p = reg.init(0);
        randomize(&mut p, &mut rng, 0.7);
        let x = randn(&mut rng, 7 * 3, 1.0);
        let e = check(&mut rng, &p, &x, |p, x| lin.forward(p, x), |p, g, x, dy| Some(lin.backward(p, g, x, dy)));
        out.push(("pointwise", e));
    }
    for (name, kernel, shape) in [("depthwise k3", 3, [3, 4, 5, 3]), ("depthwise k5", 5, [4, 3, 2, 2])] {
        let mut reg = Registry::new();
        let conv = DepthwiseConv::new(&mut reg, "dw", shape[3], kernel);
        let mut p = reg.init(0);
        randomize(&mut p, &mut rng, 0.7);
        let x = randn(&mut rng, shape.iter().product(), 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |p, x| conv.forward(p, &tensor(shape, x)).into_data(),
            |p, g, x, dy| Some(conv.backward(p, g, &tensor(shape, x), &tensor(shape, dy)).into_data()),
        );
        out.push((name, e));
    }
    {
        let shape = [4, 2, 4, 3];
        let mut reg = Registry::new();
        let conv = DownConv::new(&mut reg, "down", 3, 5);
        let mut p = reg.init(0);
        randomize(&mut p, &mut rng, 0.7);
        let x = randn(&mut rng, shape.iter().product(), 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |p, x| conv.forward(p, &tensor(shape, x)).into_data(),
            |p, g, x, dy| {
                let dy = Tensor4::new([2, 1, 2, 5], dy.to_vec()).unwrap();
                Some(conv.backward(p, g, &tensor(shape, x), &dy).into_data())
            },
        );
        out.push(("strided conv", e));
    }
    {
        let mut reg = Registry::new();
        let ln = LayerNorm::new(&mut reg, "ln", 6);
        let mut p = reg.init(0);
        randomize(&mut p, &mut rng, 0.7);
        let x = randn(&mut rng, 5 * 6, 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |p, x| ln.forward(p, x).0,
            |p, g, x, dy| {
                let (_, cache) = ln.forward(p, x);
                Some(ln.backward(p, g, &cache, dy))
            },
        );
        out.push(("layer norm", e));
    }
    {
        let p: ParamStore<f64> = Registry::new().init(0);
        let x = randn(&mut rng, 40, 2.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |_, x| gelu(x).0,
            |_, _, x, dy| Some(gelu(x).1.iter().zip(dy).map(|(a, b)| a * b).collect()),
        );
        out.push(("gelu", e));
    }
    {
        let mut reg = Registry::new();
        let ls = LayerScale::new(&mut reg, "gamma", 4, 1e-6);
        let mut p = reg.init(0);
        randomize(&mut p, &mut rng, 0.7);
        let x = randn(&mut rng, 6 * 4, 1.0);
        let e = check(&mut rng, &p, &x, |p, x| ls.forward(p, x), |p, g, x, dy| Some(ls.backward(p, g, x, dy)));
        out.push(("layer scale", e));
    }
    {
        let p: ParamStore<f64> = Registry::new().init(0);
        let shape = [2, 3, 2, 3];
        let x = randn(&mut rng, shape.iter().product(), 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |_, x| upsample2(&tensor(shape, x)).into_data(),
            |_, _, _, dy| Some(upsample2_backward(&Tensor4::new([4, 6, 4, 3], dy.to_vec()).unwrap()).into_data()),
        );
        out.push(("upsample", e));
    }
    {
        let p: ParamStore<f64> = Registry::new().init(0);
        let (sa, sb) = ([2, 2, 3, 2], [2, 2, 3, 3]);
        let na: usize = sa.iter().product();
        let x = randn(&mut rng, na + sb.iter().product::<usize>(), 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |_, x| concat(&tensor(sa, &x[..na]), &tensor(sb, &x[na..])).into_data(),
            |_, _, _, dy| {
                let (da, db) = concat_backward(&Tensor4::new([2, 2, 3, 5], dy.to_vec()).unwrap(), 2);
                let mut dx = da.into_data();
                dx.extend(db.into_data());
                Some(dx)
            },
        );
        out.push(("concat", e));
    }
    {
        let p: ParamStore<f64> = Registry::new().init(0);
        let x = off_kink(&mut rng, 30);
        let e = check(&mut rng, &p, &x, |_, x| clamp_min0(x), |_, _, x, dy| Some(clamp_min0_backward(x, dy)));
        out.push(("clamp", e));
    }
    {
        let (r, d, c) = (4, 3, 2);
        let centers: Vec<[usize; 3]> = vec![[0, 0, 0], [3, 1, 2], [1, 1, 1], [3, 1, 2], [2, 3, 0]];
        let p: ParamStore<f64> = Registry::new().init(0);
        let x = randn(&mut rng, centers.len() * d * d * d * c, 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |_, x| scatter_features(x, &centers, r, d, c).unwrap().into_data(),
            |_, _, _, dy| Some(scatter_backward(&Tensor4::cube(r, c + 1, dy.to_vec()).unwrap(), &centers, d, c)),
        );
        out.push(("scatter", e));
    }
    {
        let shape = [2, 3, 4, 3];
        let mut reg = Registry::new();
        let block = ConvNextBlock::new(&mut reg, "block", 3, 3);
        let mut p = reg.init(0);
        randomize(&mut p, &mut rng, 0.7);
        let x = randn(&mut rng, shape.iter().product(), 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |p, x| block.forward(p, &tensor(shape, x)).unwrap().0.into_data(),
            |p, g, x, dy| {
                let (_, cache) = block.forward(p, &tensor(shape, x)).unwrap();
                Some(block.backward(p, g, &cache, &tensor(shape, dy)).into_data())
            },
        );
        out.push(("convnext block", e));
    }
    {
        let cfg = small_unet_config();
        let shape = [4, 4, 4, cfg.in_channels];
        let mut reg = Registry::new();
        let unet = UNet::new(&mut reg, "unet", &cfg).unwrap();
        let mut p = reg.init(0);
        randomize(&mut p, &mut rng, 0.5);
        lift_head(&mut p, "unet.head.bias");
        let x = randn(&mut rng, shape.iter().product(), 1.0);
        let e = check(
            &mut rng,
            &p,
            &x,
            |p, x| unet.forward(p, &tensor(shape, x)).unwrap().0.into_data(),
            |p, g, x, dy| {
                let (y, cache) = unet.forward(p, &tensor(shape, x)).unwrap();
                Some(unet.backward(p, g, &cache, &y.with_channels(1, dy.to_vec())).into_data())
            },
        );
        out.push(("u-net", e));
    }
    {
        let model = MuNet::new(small_munet_config()).unwrap();
        let events = iron_events(4, 24, 3);
        let mut p = model.init_params::<f64>(0);
        randomize(&mut p, &mut rng, 0.5);
        lift_head(&mut p, "unet.head.bias");
        let prepared = model.prepare::<f64>(&events, 100.0).unwrap();
        let e = check(
            &mut rng,
            &p,
            &[],
            |p, _| model.forward(p, &prepared).unwrap().0.into_data(),
            |p, g, _, dy| {
                let (y, cache) = model.forward(p, &prepared).unwrap();
                model.backward(p, g, &prepared, &cache, &y.with_channels(1, dy.to_vec()));
                None
            },
        );
        out.push(("full model", e));
    }
    out
}

/// Events that scatter exactly at `points` (straight lines meeting there),
/// entering through the top face and leaving through the bottom face.
pub fn events_through(points: &[Vec3], half: f64, rng: &mut ChaCha8Rng) -> Vec<MuonEvent> {
    points
        .iter()
        .map(|&p| {
            let down = |rng: &mut ChaCha8Rng| {
                let (a, b): (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                Vec3::new(a, b, -1.0).normalized()
            };
            let d0 = down(rng);
            let mut d1 = down(rng);
            while (d1 - d0).norm() < 0.02 {
                d1 = down(rng);
            }
            let momentum = rng.random_range(500.0..20_000.0);
            MuonEvent {
                entry_position: p - d0 * ((half - p.z) / -d0.z),
                exit_position: p + d1 * ((p.z + half) / -d1.z),
                entry_direction: d0,
                exit_direction: d1,
                momentum,
                true_momentum: momentum,
            }
        })
        .collect()
}

/// Exact recovery: with d = 1 and the identity projector, reading back the
/// voxels hit once returns the multiset of event features. Returns the
/// number of mismatches (missing, spurious or differing vectors).
pub fn multiset_recovery_mismatches(resolution: usize, count: usize, seed: u64) -> usize {
    let extent = 100.0;
    let spec = GridSpec::new(resolution, extent).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut voxels: Vec<usize> = (0..spec.len()).collect();
    voxels.shuffle(&mut rng);
    let points: Vec<Vec3> = voxels[..count].iter().map(|&v| spec.voxel_center(spec.coords(v))).collect();
    let events = events_through(&points, spec.half_extent(), &mut rng);

    let cfg = ScatterConfig { resolution, point_size: 1, channels: FEATURES, ..ScatterConfig::default() };
    let placed = place_events(&events, &cfg, extent).unwrap();
    let blocks: Vec<f64> = placed.iter().flat_map(|p| p.features).collect();
    let centers: Vec<[usize; 3]> = placed.iter().map(|p| p.center).collect();
    let volume = scatter_features(&blocks, &centers, resolution, 1, FEATURES).unwrap();

    let mut recovered: Vec<Vec<u64>> = Vec::new();
    let mut mismatches = 0;
    for cell in volume.data().chunks_exact(FEATURES + 1) {
        match cell[FEATURES] {
            0.0 => {}
            1.0 => recovered.push(cell[..FEATURES].iter().map(|v| v.to_bits()).collect()),
            _ => mismatches += 1,
        }
    }
    let mut expected: Vec<Vec<u64>> =
        events.iter().map(|e| featurize(e, spec.half_extent()).iter().map(|v| v.to_bits()).collect()).collect();
    recovered.sort();
    expected.sort();
    mismatches += recovered.len().abs_diff(expected.len());
    mismatches += recovered.iter().zip(&expected).filter(|(a, b)| a != b).count();
    // each vector must come back at its own scattering voxel
    for (e, p) in events.iter().zip(&points) {
        let key = featurize(e, spec.half_extent());
        let v = spec.index(spec.voxel_of(*p).unwrap());
        let cell = &volume.data()[v * (FEATURES + 1)..v * (FEATURES + 1) + FEATURES];
        if cell.iter().zip(&key).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    mismatches
}

/// Deep-Sets reduction: when each block covers the whole volume, every
/// voxel holds the plain sum of the projected features aimed at it and the
/// counter holds the event count. Checked bit for bit against a direct sum
/// of projector outputs, for d = r (odd, centred) and d = 2r − 1 (any
/// centre). Returns the number of differing values.
pub fn deep_sets_mismatches(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for (r, d) in [(5usize, 5usize), (3, 3), (3, 5), (4, 7)] {
        let c = 3;
        let cfg = MuNetConfig {
            unet: UNetConfig { blocks: vec![1], channels: vec![c], in_channels: c, kernel: 3 },
            // the projector does not depend on r; build the model at r = d
            scatter: ScatterConfig { resolution: d, point_size: d, channels: c, ..ScatterConfig::default() },
            hidden: 16,
        };
        let model = MuNet::new(cfg).unwrap();
        let p = model.init_params::<f64>(seed);
        let events = iron_events(r, 40, seed);
        let prepared = model.prepare::<f64>(&events, 100.0).unwrap();
        let blocks = model.project(&p, &prepared.inputs);
        let n = prepared.centers.len();
        let centers: Vec<[usize; 3]> = if d == r {
            vec![[r / 2; 3]; n]
        } else {
            (0..n).map(|_| [rng.random_range(0..r), rng.random_range(0..r), rng.random_range(0..r)]).collect()
        };
        let volume = scatter_features(&blocks, &centers, r, d, c).unwrap();
        let len = d * d * d * c;
        let h = (d / 2) as isize;
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let mut direct = vec![0.0f64; c];
                    for (i, ctr) in centers.iter().enumerate() {
                        let bz = (z as isize - ctr[2] as isize + h) as usize;
                        let by = (y as isize - ctr[1] as isize + h) as usize;
                        let bx = (x as isize - ctr[0] as isize + h) as usize;
                        let cell = bx + d * (by + d * bz);
                        for j in 0..c {
                            direct[j] += blocks[i * len + cell * c + j];
                        }
                    }
                    let v = x + r * (y + r * z);
                    let got = &volume.data()[v * (c + 1)..(v + 1) * (c + 1)];
                    mismatches += got[..c].iter().zip(&direct).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
                    if got[c] != n as f64 {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    mismatches
}

/// Full pipeline (placement, projector, scatter, fuse, U-Net) on shuffled
/// copies of one event list; returns how many permutations changed any
/// output bit.
pub fn pipeline_permutation_mismatches(dosage: usize, permutations: usize, seed: u64) -> usize {
    let lib = MaterialLibrary::default();
    let phantom = generate_phantom(seed, &PhantomConfig::default(), 100.0, &lib).unwrap();
    let events = simulate_event_set(&phantom, dosage, &SimConfig::default(), seed).unwrap();
    let model = MuNet::new(MuNetConfig::nano()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p64 = model.init_params::<f64>(seed);
    // wake up the residual branches so the U-Net is not a near-identity
    for spec_id in 0..p64.specs().len() {
        if p64.specs()[spec_id].name.ends_with("gamma") {
            for v in p64.tensors_mut()[spec_id].iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let p = p64.cast::<f32>();
    let reference: Vec<u64> = model.reconstruct::<f32>(&p, &events, 100.0).unwrap().values().iter().map(|v| v.to_bits()).collect();
    let mut shuffled = events.clone();
    (0..permutations)
        .filter(|_| {
            shuffled.shuffle(&mut rng);
            let out: Vec<u64> =
                model.reconstruct::<f32>(&p, &shuffled, 100.0).unwrap().values().iter().map(|v| v.to_bits()).collect();
            out != reference
        })
        .count()
}
