//! Flat store of named parameter tensors and matching gradient buffers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{NnError, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with this std, truncated at ±2 std.
    TruncNormal(f64),
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collects parameter declarations while a model is being built.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn count(&self) -> usize {
        self.specs.iter().map(ParamSpec::len).sum()
    }

    /// Initialized parameters; draws happen in declaration order.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = self
            .specs
            .iter()
            .map(|s| {
                let n = s.len();
                match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Constant(c) => vec![T::of(c); n],
                    Init::TruncNormal(std) => (0..n).map(|_| T::of(std * trunc_normal(&mut rng))).collect(),
                }
            })
            .collect();
        ParamStore { specs: self.specs.clone(), data }
    }
}

fn trunc_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    data: Vec<Vec<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn from_parts(specs: Vec<ParamSpec>, data: Vec<Vec<T>>) -> Result<Self> {
        if specs.len() != data.len() || specs.iter().zip(&data).any(|(s, d)| s.len() != d.len()) {
            return Err(NnError::Shape("parameter data does not match declarations".into()));
        }
        Ok(ParamStore { specs, data })
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.data
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads { data: self.data.iter().map(|d| vec![T::zero(); d.len()]).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            data: self.data.iter().map(|d| d.iter().map(|v| U::of(v.as_f64())).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.data
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.data.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().flatten().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}
