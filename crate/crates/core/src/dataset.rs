//! Binary dataset container for (phantom, detected muons) samples.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MUTM" | version: u16 | sample count: u32
//! per sample:
//!   resolution: u32 | r³ × f32 densities (x fastest)
//!   event count: u32 | per event 15 × f32:
//!     x₀(3) x_f(3) p̂₀(3) p̂_f(3) |p| |p̂_f − p̂₀| true |p|
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::VoxelGrid;
use crate::simulator::MuonEvent;
use crate::vec3::Vec3;

pub const MAGIC: &[u8; 4] = b"MUTM";
pub const VERSION: u16 = 1;
pub const EVENT_FLOATS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub grid: VoxelGrid,
    pub events: Vec<MuonEvent>,
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn qv(v: Vec3) -> Vec3 {
    Vec3::new(q(v.x), q(v.y), q(v.z))
}

impl Sample {
    /// Round every stored quantity to the file's f32 precision, so an
    /// in-memory sample equals what a reader gets back.
    pub fn quantized(grid: VoxelGrid, events: Vec<MuonEvent>) -> Result<Self> {
        let values = grid.values().iter().map(|&v| q(v)).collect();
        let grid = VoxelGrid::from_values(grid.resolution(), grid.extent(), values)?;
        let events = events
            .into_iter()
            .map(|e| MuonEvent {
                entry_position: qv(e.entry_position),
                exit_position: qv(e.exit_position),
                entry_direction: qv(e.entry_direction),
                exit_direction: qv(e.exit_direction),
                momentum: q(e.momentum),
                true_momentum: q(e.true_momentum),
            })
            .collect();
        Ok(Sample { grid, events })
    }
}

pub fn event_record(e: &MuonEvent) -> [f32; EVENT_FLOATS] {
    let mut r = [0f32; EVENT_FLOATS];
    let vecs = [e.entry_position, e.exit_position, e.entry_direction, e.exit_direction];
    for (n, v) in vecs.iter().enumerate() {
        for a in 0..3 {
            r[3 * n + a] = v[a] as f32;
        }
    }
    r[12] = e.momentum as f32;
    r[13] = e.chord() as f32;
    r[14] = e.true_momentum as f32;
    r
}

fn event_from_record(r: &[f32; EVENT_FLOATS]) -> MuonEvent {
    let v = |n: usize| Vec3::new(r[3 * n] as f64, r[3 * n + 1] as f64, r[3 * n + 2] as f64);
    MuonEvent {
        entry_position: v(0),
        exit_position: v(1),
        entry_direction: v(2),
        exit_direction: v(3),
        momentum: r[12] as f64,
        true_momentum: r[14] as f64,
    }
}

pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.grid.resolution() as u32).to_le_bytes());
        for &v in s.grid.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(s.events.len() as u32).to_le_bytes());
        for e in &s.events {
            for f in event_record(e) {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parse a dataset; grids are placed in a cube of side `extent` cm.
pub fn decode_dataset(bytes: &[u8], extent: f64) -> Result<Vec<Sample>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a MUTM dataset".into()));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}, expected {VERSION}")));
    }
    let count = cur.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for n in 0..count {
        let r = cur.u32("resolution")? as usize;
        if r == 0 {
            return Err(Error::Format(format!("sample {n} has zero resolution")));
        }
        let cells = r.checked_pow(3).ok_or_else(|| Error::Format(format!("resolution {r} too large")))?;
        let values: Vec<f64> = cur.f32s(cells, "grid values")?.into_iter().map(f64::from).collect();
        let grid = VoxelGrid::from_values(r, extent, values).map_err(|e| Error::Format(format!("sample {n}: {e}")))?;
        let n_events = cur.u32("event count")? as usize;
        let floats = cur.f32s(
            n_events.checked_mul(EVENT_FLOATS).ok_or_else(|| Error::Format("event count too large".into()))?,
            "events",
        )?;
        let events = floats
            .chunks_exact(EVENT_FLOATS)
            .map(|c| event_from_record(c.try_into().unwrap()))
            .collect();
        samples.push(Sample { grid, events });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(samples)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(samples))?;
    Ok(())
}

pub fn read_dataset(path: &Path, extent: f64) -> Result<Vec<Sample>> {
    decode_dataset(&std::fs::read(path)?, extent)
}
