//! Checkpoint container.
//!
//! ```text
//! "MUCK" | version: u16 | fingerprint length: u32 | fingerprint (UTF-8)
//! tensor count: u32 | per tensor: name length u32, name, rank u32,
//!   dims u32…, values f64…
//! optimizer step: u64 | first moments f64… | second moments f64…
//! ```
//! All little-endian; tensors in declaration order. Values are widened to
//! f64, which round-trips f32 exactly.

use std::path::Path;

use crate::error::{NnError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"MUCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub fingerprint: String,
    pub params: ParamStore<T>,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(fingerprint: String, params: &ParamStore<T>, optimizer: &AdamW<T>) -> Self {
        Checkpoint {
            fingerprint,
            params: params.clone(),
            step: optimizer.step,
            m: optimizer.m.clone(),
            v: optimizer.v.clone(),
        }
    }

    pub fn optimizer(&self, config: AdamWConfig) -> AdamW<T> {
        AdamW { config, step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&(self.params.specs().len() as u32).to_le_bytes());
        for (spec, data) in self.params.specs().iter().zip(self.params.tensors()) {
            put_str(&mut out, &spec.name);
            out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
            for &d in &spec.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_values(&mut out, data);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        for t in self.m.iter().chain(&self.v) {
            put_values(&mut out, t);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = r.string()?;
        let count = r.u32()? as usize;
        let mut specs = Vec::new();
        let mut data = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            data.push(r.values::<T>(n)?);
            specs.push(ParamSpec { name, shape, init: Init::Zeros });
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let lens: Vec<usize> = data.iter().map(Vec::len).collect();
        let m = lens.iter().map(|&n| r.values::<T>(n)).collect::<Result<Vec<_>>>()?;
        let v = lens.iter().map(|&n| r.values::<T>(n)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { fingerprint, params: ParamStore::from_parts(specs, data)?, step, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Parameters for a model with the given fingerprint and layout.
    pub fn params_for(&self, fingerprint: &str, template: &ParamStore<T>) -> Result<ParamStore<T>> {
        if self.fingerprint != fingerprint {
            return Err(NnError::Checkpoint(format!(
                "checkpoint was written for a different model configuration: {}",
                self.fingerprint
            )));
        }
        let same = template.specs().len() == self.params.specs().len()
            && template.specs().iter().zip(self.params.specs()).all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same {
            return Err(NnError::Checkpoint("parameter layout does not match the model".into()));
        }
        ParamStore::from_parts(template.specs().to_vec(), self.params.tensors().to_vec())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, v: &[T]) {
    for x in v {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnError::Checkpoint("invalid UTF-8".into()))
    }

    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect())
    }
}
