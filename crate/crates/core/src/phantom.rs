//! Voxel phantoms: materials, the scattering-density grid and the
//! fractal-noise generator that produces random imaging targets.
//!
//! A phantom is a cube of side `extent` centred at the origin, split into
//! `r³` voxels. Each voxel stores the scattering density λ = 1/X₀ in cm⁻¹
//! of the material filling it (0 for empty space).

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

pub const EMPTY: &str = "empty";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    /// X₀ in cm; `f64::INFINITY` for empty space.
    pub radiation_length: f64,
}

impl Material {
    pub fn new(name: impl Into<String>, radiation_length: f64) -> Result<Self> {
        let m = Material { name: name.into(), radiation_length };
        material_lambda(&m)?;
        Ok(m)
    }

    pub fn empty() -> Self {
        Material { name: EMPTY.to_string(), radiation_length: f64::INFINITY }
    }

    pub fn is_empty(&self) -> bool {
        self.name == EMPTY
    }

    pub fn lambda(&self) -> f64 {
        material_lambda(self).expect("validated at construction")
    }
}

/// Scattering density of a material in cm⁻¹.
pub fn material_lambda(material: &Material) -> Result<f64> {
    if material.is_empty() {
        return Ok(0.0);
    }
    let x0 = material.radiation_length;
    if !(x0 > 0.0) || !x0.is_finite() {
        return Err(Error::InvalidMaterial {
            name: material.name.clone(),
            radiation_length: x0,
        });
    }
    Ok(1.0 / x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialLibrary {
    materials: Vec<Material>,
}

impl MaterialLibrary {
    pub fn new(materials: Vec<Material>) -> Result<Self> {
        if materials.is_empty() {
            return Err(Error::InvalidArgument("material library is empty".into()));
        }
        for (i, m) in materials.iter().enumerate() {
            material_lambda(m)?;
            if materials[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::InvalidArgument(format!("duplicate material `{}`", m.name)));
            }
        }
        let lib = MaterialLibrary { materials };
        if !(lib.lambda_max() > 0.0) {
            return Err(Error::InvalidArgument("library has no non-empty material".into()));
        }
        Ok(lib)
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    pub fn lambda_max(&self) -> f64 {
        self.materials.iter().map(Material::lambda).fold(0.0, f64::max)
    }

    /// Members that can be assigned to an occupied component.
    pub fn solids(&self) -> impl Iterator<Item = &Material> {
        self.materials.iter().filter(|m| !m.is_empty())
    }

    pub fn get(&self, name: &str) -> Option<&Material> {
        self.materials.iter().find(|m| m.name == name)
    }
}

impl Default for MaterialLibrary {
    fn default() -> Self {
        let table = [
            ("water", 36.08),
            ("concrete", 11.55),
            ("aluminum", 8.897),
            ("iron", 1.757),
            ("lead", 0.5612),
            ("uranium", 0.3166),
        ];
        let mut materials = vec![Material::empty()];
        materials.extend(table.iter().map(|&(n, x0)| Material { name: n.into(), radiation_length: x0 }));
        MaterialLibrary { materials }
    }
}

/// Geometry of a cubic voxel grid centred at the origin, without values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: usize,
    /// Cube side in cm.
    pub extent: f64,
}

impl GridSpec {
    pub fn new(resolution: usize, extent: f64) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("grid resolution must be at least 1".into()));
        }
        if !(extent > 0.0) {
            return Err(Error::InvalidArgument(format!("grid extent {extent} must be positive")));
        }
        Ok(GridSpec { resolution, extent })
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.resolution == 0
    }

    pub fn voxel_size(&self) -> f64 {
        self.extent / self.resolution as f64
    }

    pub fn half_extent(&self) -> f64 {
        0.5 * self.extent
    }

    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let r = self.resolution;
        [index % r, (index / r) % r, index / (r * r)]
    }

    pub fn voxel_center(&self, [i, j, k]: [usize; 3]) -> Vec3 {
        let l = self.voxel_size();
        let h = self.half_extent();
        Vec3::new(
            -h + (i as f64 + 0.5) * l,
            -h + (j as f64 + 0.5) * l,
            -h + (k as f64 + 0.5) * l,
        )
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let h = self.half_extent();
        (0..3).all(|a| p[a] >= -h && p[a] <= h)
    }

    /// Voxel containing `p`; points on the far faces map to the last voxel.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        if !self.contains(p) {
            return None;
        }
        Some(self.voxel_of_clamped(p))
    }

    /// Nearest voxel to `p`, clamping coordinates outside the cube.
    pub fn voxel_of_clamped(&self, p: Vec3) -> [usize; 3] {
        let l = self.voxel_size();
        let h = self.half_extent();
        let r = self.resolution as isize;
        let mut out = [0; 3];
        for a in 0..3 {
            let idx = ((p[a] + h) / l).floor() as isize;
            out[a] = idx.clamp(0, r - 1) as usize;
        }
        out
    }
}

/// Cubic grid of scattering densities, x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    spec: GridSpec,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(resolution: usize, extent: f64) -> Result<Self> {
        Self::from_values(resolution, extent, vec![0.0; resolution.pow(3)])
    }

    pub fn filled(resolution: usize, extent: f64, value: f64) -> Result<Self> {
        Self::from_values(resolution, extent, vec![value; resolution.pow(3)])
    }

    pub fn from_values(resolution: usize, extent: f64, values: Vec<f64>) -> Result<Self> {
        let spec = GridSpec::new(resolution, extent)?;
        if values.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {resolution}³ grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative or NaN density {v}")));
        }
        Ok(VoxelGrid { spec, values })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn extent(&self) -> f64 {
        self.spec.extent
    }

    pub fn voxel_size(&self) -> f64 {
        self.spec.voxel_size()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, v: [usize; 3]) -> f64 {
        self.values[self.spec.index(v)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub octaves: u32,
    pub persistence: f64,
    /// Lattice cells across the cube at the first octave.
    pub base_frequency: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { octaves: 3, persistence: 0.5, base_frequency: 2.5 }
    }
}

/// Improved-Perlin gradient noise over an integer lattice with a seeded
/// permutation table.
struct GradientLattice {
    perm: [u8; 512],
}

impl GradientLattice {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base: Vec<u8> = (0..=255).collect();
        base.shuffle(&mut rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = base[i & 255];
        }
        GradientLattice { perm }
    }

    fn hash(&self, x: i64, y: i64, z: i64) -> u8 {
        let p = &self.perm;
        let xi = (x & 255) as usize;
        let yi = (y & 255) as usize;
        let zi = (z & 255) as usize;
        p[p[p[xi] as usize + yi] as usize + zi]
    }

    fn grad(hash: u8, x: f64, y: f64, z: f64) -> f64 {
        // 12 cube-edge directions (4 repeated to fill 16 slots)
        match hash & 15 {
            0 => x + y,
            1 => -x + y,
            2 => x - y,
            3 => -x - y,
            4 => x + z,
            5 => -x + z,
            6 => x - z,
            7 => -x - z,
            8 => y + z,
            9 => -y + z,
            10 => y - z,
            11 => -y - z,
            12 => x + y,
            13 => -y + z,
            14 => -x + y,
            _ => -y - z,
        }
    }

    fn sample(&self, x: f64, y: f64, z: f64) -> f64 {
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
        let (fx, fy, fz) = (x - x0, y - y0, z - z0);
        let (ix, iy, iz) = (x0 as i64, y0 as i64, z0 as i64);
        let (u, v, w) = (fade(fx), fade(fy), fade(fz));
        let g = |dx: i64, dy: i64, dz: i64| {
            Self::grad(
                self.hash(ix + dx, iy + dy, iz + dz),
                fx - dx as f64,
                fy - dy as f64,
                fz - dz as f64,
            )
        };
        let x00 = lerp(g(0, 0, 0), g(1, 0, 0), u);
        let x10 = lerp(g(0, 1, 0), g(1, 1, 0), u);
        let x01 = lerp(g(0, 0, 1), g(1, 0, 1), u);
        let x11 = lerp(g(0, 1, 1), g(1, 1, 1), u);
        lerp(lerp(x00, x10, v), lerp(x01, x11, v), w)
    }
}

fn noise_layer(seed: u64, resolution: usize, frequency: f64) -> Vec<f64> {
    let lattice = GradientLattice::new(seed);
    let r = resolution;
    let mut out = Vec::with_capacity(r * r * r);
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let c = |n: usize| (n as f64 + 0.5) / r as f64 * frequency;
                out.push(lattice.sample(c(i), c(j), c(k)));
            }
        }
    }
    out
}

fn rescale_unit(field: &mut [f64]) {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in field.iter_mut() {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
    }
}

fn octave_seed(seed: u64, octave: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(octave).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Octave-summed gradient noise on an `r³` lattice, min-max rescaled to
/// [0, 1]. A constant field (e.g. `r = 1`) maps to 0.5.
pub fn fractal_noise(seed: u64, resolution: usize, config: &NoiseConfig) -> Result<Vec<f64>> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("noise resolution must be at least 1".into()));
    }
    if config.octaves < 1 {
        return Err(Error::InvalidArgument("octaves must be at least 1".into()));
    }
    if !(config.persistence > 0.0 && config.persistence <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "persistence {} outside (0, 1]",
            config.persistence
        )));
    }
    if !(config.base_frequency > 0.0) {
        return Err(Error::InvalidArgument("base frequency must be positive".into()));
    }
    let mut field = vec![0.0; resolution.pow(3)];
    let mut amplitude = 1.0;
    let mut frequency = config.base_frequency;
    for octave in 0..config.octaves {
        let layer = noise_layer(octave_seed(seed, octave), resolution, frequency);
        for (f, l) in field.iter_mut().zip(layer) {
            *f += amplitude * l;
        }
        amplitude *= config.persistence;
        frequency *= 2.0;
    }
    rescale_unit(&mut field);
    Ok(field)
}

/// 6-connected components of the `true` cells, labelled in order of their
/// lowest voxel index. Returns one label per cell (`usize::MAX` for unset
/// cells) and the component count.
pub fn connected_components(mask: &[bool], resolution: usize) -> (Vec<usize>, usize) {
    let r = resolution;
    let mut labels = vec![usize::MAX; mask.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != usize::MAX {
            continue;
        }
        labels[start] = count;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (i, j, k) = (idx % r, (idx / r) % r, idx / (r * r));
            let mut visit = |n: usize| {
                if mask[n] && labels[n] == usize::MAX {
                    labels[n] = count;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(idx - 1);
            }
            if i + 1 < r {
                visit(idx + 1);
            }
            if j > 0 {
                visit(idx - r);
            }
            if j + 1 < r {
                visit(idx + r);
            }
            if k > 0 {
                visit(idx - r * r);
            }
            if k + 1 < r {
                visit(idx + r * r);
            }
        }
        count += 1;
    }
    (labels, count)
}

/// Turn a noise field into a phantom: cells below `threshold` are empty,
/// each occupied component gets one material drawn uniformly from the
/// library's non-empty members.
pub fn phantom_from_noise(
    noise: &[f64],
    resolution: usize,
    extent: f64,
    library: &MaterialLibrary,
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<VoxelGrid> {
    if noise.len() != resolution.pow(3) {
        return Err(Error::ShapeMismatch(format!(
            "{} noise values for a {resolution}³ grid",
            noise.len()
        )));
    }
    let mask: Vec<bool> = noise.iter().map(|&n| n >= threshold).collect();
    let (labels, count) = connected_components(&mask, resolution);
    let solids: Vec<f64> = library.solids().map(Material::lambda).collect();
    let component_lambda: Vec<f64> = (0..count).map(|_| solids[rng.random_range(0..solids.len())]).collect();
    let values = labels
        .iter()
        .map(|&l| if l == usize::MAX { 0.0 } else { component_lambda[l] })
        .collect();
    VoxelGrid::from_values(resolution, extent, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub resolution: usize,
    pub occupancy_threshold: f64,
    pub noise: NoiseConfig,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { resolution: 16, occupancy_threshold: 0.5, noise: NoiseConfig::default() }
    }
}

/// Random phantom over the cube of side `extent`, fully determined by
/// `seed` and the configuration.
pub fn generate_phantom(
    seed: u64,
    config: &PhantomConfig,
    extent: f64,
    library: &MaterialLibrary,
) -> Result<VoxelGrid> {
    let t = config.occupancy_threshold;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("occupancy threshold {t} outside (0, 1)")));
    }
    let noise = fractal_noise(seed, config.resolution, &config.noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    phantom_from_noise(&noise, config.resolution, extent, library, t, &mut rng)
}
