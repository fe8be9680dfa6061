//! Binary dataset files for training data.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PLTM"
//! 4       4     version: u32 = 1
//! 8       4     kind: u32 (0 regressor, 1 classifier)
//! 12      4     direction: u32 (0 forward, 1 backward)
//! 16      8     lens_hash: u64
//! 24      8     path_id: u64
//! 32      8     record_count: u64
//! 40      16    input normalization minima: 4 x f32 (r, wx, wy, lambda)
//! 56      16    input normalization maxima: 4 x f32
//! 72      40*n  records
//! ```
//!
//! Each record is ten f32 values: canonical input (r mm, omega_x, omega_y,
//! lambda nm), a validity flag (0 or 1), then the outputs (exit x mm, y mm,
//! omega_x, omega_y, intensity). Outputs are zero for invalid records.
//! Inputs are stored raw; the header bounds define the affine map to [-1, 1]
//! applied at training time.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::trace::Direction;

pub const DATASET_MAGIC: &[u8; 4] = b"PLTM";
pub const DATASET_VERSION: u32 = 1;
pub const RECORD_WIDTH: usize = 40;
pub const HEADER_WIDTH: usize = 72;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Regressor = 0,
    Classifier = 1,
}

impl DatasetKind {
    pub fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(DatasetKind::Regressor),
            1 => Ok(DatasetKind::Classifier),
            other => Err(Error::Dataset(format!("unknown dataset kind {other}"))),
        }
    }
}

pub fn direction_to_u32(d: Direction) -> u32 {
    match d {
        Direction::Forward => 0,
        Direction::Backward => 1,
    }
}

pub fn direction_from_u32(v: u32) -> Result<Direction> {
    match v {
        0 => Ok(Direction::Forward),
        1 => Ok(Direction::Backward),
        other => Err(Error::Dataset(format!("unknown direction {other}"))),
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub kind: DatasetKind,
    pub direction: Direction,
    pub lens_hash: u64,
    pub path_id: u64,
    pub norm_min: [f32; 4],
    pub norm_max: [f32; 4],
}

/// One training sample; see the module docs for the byte layout.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Record {
    pub input: [f32; 4],
    pub valid: f32,
    pub output: [f32; 5],
}

impl Record {
    pub fn is_valid(&self) -> bool {
        self.valid != 0.0
    }

    fn write_to(&self, buf: &mut Vec<u8>) {
        for v in self.input {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.valid.to_le_bytes());
        for v in self.output {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_from(b: &[u8; RECORD_WIDTH]) -> Self {
        let f = |i: usize| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap());
        Record {
            input: [f(0), f(1), f(2), f(3)],
            valid: f(4),
            output: [f(5), f(6), f(7), f(8), f(9)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Header bounds from stored inputs; degenerate dimensions keep a unit
    /// half-width so normalization stays invertible.
    pub fn compute_normalization(records: &[Record]) -> ([f32; 4], [f32; 4]) {
        let mut lo = [f32::INFINITY; 4];
        let mut hi = [f32::NEG_INFINITY; 4];
        for r in records {
            for d in 0..4 {
                lo[d] = lo[d].min(r.input[d]);
                hi[d] = hi[d].max(r.input[d]);
            }
        }
        for d in 0..4 {
            if !lo[d].is_finite() || !hi[d].is_finite() {
                lo[d] = 0.0;
                hi[d] = 1.0;
            } else if lo[d] == hi[d] {
                lo[d] -= 0.5;
                hi[d] += 0.5;
            }
        }
        (lo, hi)
    }

    pub fn write_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_WIDTH + RECORD_WIDTH * self.records.len());
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.header.kind as u32).to_le_bytes());
        buf.extend_from_slice(&direction_to_u32(self.header.direction).to_le_bytes());
        buf.extend_from_slice(&self.header.lens_hash.to_le_bytes());
        buf.extend_from_slice(&self.header.path_id.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for v in self.header.norm_min {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.header.norm_max {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            r.write_to(&mut buf);
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.write_bytes())?;
        Ok(())
    }

    pub fn read_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < HEADER_WIDTH {
            return Err(Error::Dataset("file shorter than header".into()));
        }
        if &bytes[0..4] != DATASET_MAGIC {
            return Err(Error::Dataset("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != DATASET_VERSION {
            return Err(Error::Dataset(format!("unsupported version {version}")));
        }
        let kind = DatasetKind::from_u32(u32_at(8))?;
        let direction = direction_from_u32(u32_at(12))?;
        let lens_hash = u64_at(16);
        let path_id = u64_at(24);
        let count = u64_at(32) as usize;
        let mut norm_min = [0f32; 4];
        let mut norm_max = [0f32; 4];
        for d in 0..4 {
            norm_min[d] = f32_at(40 + 4 * d);
            norm_max[d] = f32_at(56 + 4 * d);
            if !norm_min[d].is_finite() || !norm_max[d].is_finite() || norm_min[d] >= norm_max[d] {
                return Err(Error::Dataset(format!(
                    "bad normalization bounds on dim {d}"
                )));
            }
        }
        let payload = &bytes[HEADER_WIDTH..];
        if payload.len() != count * RECORD_WIDTH {
            return Err(Error::Dataset(format!(
                "record count {count} does not match payload of {} bytes",
                payload.len()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(RECORD_WIDTH) {
            records.push(Record::read_from(chunk.try_into().unwrap()));
        }
        Ok(Dataset {
            header: DatasetHeader {
                kind,
                direction,
                lens_hash,
                path_id,
                norm_min,
                norm_max,
            },
            records,
        })
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_bytes(&bytes)
    }
}

/// Map a raw input to [-1, 1] per dimension with the header bounds.
pub fn normalize_input(input: [f32; 4], lo: &[f32; 4], hi: &[f32; 4]) -> [f32; 4] {
    let mut out = [0f32; 4];
    for d in 0..4 {
        out[d] = 2.0 * (input[d] - lo[d]) / (hi[d] - lo[d]) - 1.0;
    }
    out
}
