//! Named-tensor container shared by checkpoints and method artifacts.
//!
//! Four magic bytes, `u32` format version, `u64` header length, a JSON header
//! (free-form metadata plus the tensor directory), then every tensor's `f64`
//! values as little-endian bits in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub(crate) fn encode(magic: &[u8; 4], version: u32, meta: serde_json::Value, params: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        meta,
        tensors: params.iter().map(|(n, p)| Entry { name: n.to_string(), shape: p.value.shape().to_vec(), kind: p.kind }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let values: usize = params.iter().map(|(_, p)| p.value.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * values);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(magic: &[u8; 4], version: u32, bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let what = String::from_utf8_lossy(magic).into_owned();
    let bad = |m: &str| Error::Format(format!("{what}: {m}"));
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(bad("missing magic bytes"));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(bad(&format!("unsupported version {found}")));
    }
    let hlen = usize::try_from(u64::from_le_bytes(bytes[8..16].try_into().unwrap())).map_err(|_| bad("header too large"))?;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut pos = 16 + hlen;
    let mut params = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
        params.insert(e.name, Tensor::new(e.shape, data)?, e.kind)?;
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.meta, params))
}

/// Free-form metadata with a set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

impl TensorArchive {
    const MAGIC: &'static [u8; 4] = b"SBTA";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(Self::MAGIC, Self::VERSION, self.meta.clone(), &self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode(Self::MAGIC, Self::VERSION, bytes)?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
