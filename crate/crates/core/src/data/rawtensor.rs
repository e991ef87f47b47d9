//! The `UQTN` raw tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `UQTN` |
//! | 4     | version `u32` (currently 1) |
//! | 1     | dtype code: 1 = `f64`, 2 = `u8` |
//! | 1     | rank `r` |
//! | 8·r   | dimensions, `u64` each |
//! | …     | payload in row-major order |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UQTN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RawTensor {
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl RawTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            RawTensor::F64(t) => t.shape(),
            RawTensor::U8 { shape, .. } => shape,
        }
    }

    pub fn to_f64(&self) -> Tensor {
        match self {
            RawTensor::F64(t) => t.clone(),
            RawTensor::U8 { shape, data } => Tensor::from_parts(shape.clone(), data.iter().map(|&v| v as f64).collect()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self {
            RawTensor::F64(_) => 1,
            RawTensor::U8 { .. } => 2,
        });
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self {
            RawTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            RawTensor::U8 { data, .. } => out.extend_from_slice(data),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("UQTN: {m}"));
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let (code, rank) = (bytes[8], bytes[9] as usize);
        let mut pos = 10;
        if bytes.len() < pos + 8 * rank {
            return Err(bad("truncated shape".into()));
        }
        let shape: Vec<usize> =
            (0..rank).map(|i| u64::from_le_bytes(bytes[pos + 8 * i..pos + 8 * i + 8].try_into().unwrap()) as usize).collect();
        pos += 8 * rank;
        let count: usize = shape.iter().product();
        let width = match code {
            1 => 8,
            2 => 1,
            c => return Err(bad(format!("unknown dtype code {c}"))),
        };
        let payload = &bytes[pos..];
        if payload.len() != count * width {
            return Err(bad(format!("payload is {} bytes, shape {shape:?} needs {}", payload.len(), count * width)));
        }
        Ok(match code {
            1 => RawTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())?),
            _ => RawTensor::U8 { shape, data: payload.to_vec() },
        })
    }
}

pub fn write_file(path: &Path, t: &RawTensor) -> Result<()> {
    fs::write(path, t.encode())?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<RawTensor> {
    RawTensor::decode(&fs::read(path)?)
}
