//! Reader and writer for the single-file, little-endian NIfTI-1 subset.
//!
//! Supported: magic `n+1\0`, up to three dimensions, datatypes uint8 (2),
//! int16 (4) and float32 (16), intensity scaling through `scl_slope` /
//! `scl_inter`, optional gzip compression (detected from the stream). The
//! affine and orientation fields are ignored; only `pixdim` spacing is
//! returned.
//!
//! Volumes are returned with tensor shape `[Z, Y, X]` (for 3-D data) so the
//! file's x-fastest voxel order is the tensor's row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::Result;
use crate::tensor::Tensor;

pub const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI variant: detached header/image pair (magic \"ni1\")")]
    UnsupportedVariant,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated NIfTI payload: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid NIfTI header: {0}")]
    Header(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I16,
    F32,
}

impl NiftiDtype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDtype::U8 => 2,
            NiftiDtype::I16 => 4,
            NiftiDtype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> std::result::Result<Self, NiftiError> {
        match code {
            2 => Ok(NiftiDtype::U8),
            4 => Ok(NiftiDtype::I16),
            16 => Ok(NiftiDtype::F32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    fn size(self) -> usize {
        match self {
            NiftiDtype::U8 => 1,
            NiftiDtype::I16 => 2,
            NiftiDtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub volume: Tensor,
    /// Voxel spacing per dimension in file order (x, y, z).
    pub spacing: Vec<f64>,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Decodes an in-memory NIfTI-1 file (gzip or plain).
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiVolume> {
    let owned;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        owned = out;
        &owned[..]
    } else {
        bytes
    };
    if bytes.len() < HEADER_LEN {
        return Err(NiftiError::Truncated { expected: HEADER_LEN, found: bytes.len() }.into());
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    match &magic {
        b"n+1\0" => {}
        b"ni1\0" => return Err(NiftiError::UnsupportedVariant.into()),
        _ => return Err(NiftiError::BadMagic(magic).into()),
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(NiftiError::Header(format!("sizeof_hdr is {sizeof_hdr} (big-endian files are not supported)")).into());
    }
    let ndim = i16_at(bytes, 40);
    if !(1..=3).contains(&ndim) {
        return Err(NiftiError::Header(format!("{ndim} dimensions; only 1 to 3 are supported")).into());
    }
    let ndim = ndim as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let d = i16_at(bytes, 42 + 2 * i);
        if d < 1 {
            return Err(NiftiError::Header(format!("dim[{}] = {d}", i + 1)).into());
        }
        dims.push(d as usize);
    }
    let dtype = NiftiDtype::from_code(i16_at(bytes, 70))?;
    let spacing: Vec<f64> = (0..ndim).map(|i| f32_at(bytes, 80 + 4 * i) as f64).collect();
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= HEADER_LEN as f32) {
        return Err(NiftiError::Header(format!("vox_offset {vox_offset}")).into());
    }
    let offset = vox_offset as usize;
    let slope = f32_at(bytes, 112) as f64;
    let inter = f32_at(bytes, 116) as f64;

    let count: usize = dims.iter().product();
    let need = offset + count * dtype.size();
    if bytes.len() < need {
        return Err(NiftiError::Truncated { expected: need, found: bytes.len() }.into());
    }
    let payload = &bytes[offset..need];
    let mut values: Vec<f64> = match dtype {
        NiftiDtype::U8 => payload.iter().map(|&v| v as f64).collect(),
        NiftiDtype::I16 => payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        NiftiDtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        for v in &mut values {
            *v = slope * *v + inter;
        }
    }
    let shape: Vec<usize> = dims.iter().rev().copied().collect();
    Ok(NiftiVolume { volume: Tensor::new(shape, values)?, spacing })
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    parse_nifti(&fs::read(path)?)
}

/// Options for [`encode_nifti`]; `slope == 0` writes unscaled data.
#[derive(Clone, Debug)]
pub struct NiftiWriteOptions {
    pub dtype: NiftiDtype,
    pub spacing: Vec<f64>,
    pub slope: f64,
    pub inter: f64,
}

impl Default for NiftiWriteOptions {
    fn default() -> Self {
        Self { dtype: NiftiDtype::F32, spacing: Vec::new(), slope: 0.0, inter: 0.0 }
    }
}

/// Encodes `volume` (tensor shape `[Z, Y, X]`, `[Y, X]` or `[X]`). Values are
/// stored raw, converted to the target type with rounding and saturation for
/// integer types; scaling fields are written as given.
pub fn encode_nifti(volume: &Tensor, opts: &NiftiWriteOptions) -> Result<Vec<u8>> {
    let ndim = volume.ndim();
    if !(1..=3).contains(&ndim) {
        return Err(NiftiError::Header(format!("cannot write {ndim}-D volume")).into());
    }
    let dims: Vec<usize> = volume.shape().iter().rev().copied().collect();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::Header(format!("dimension too large: {dims:?}")).into());
    }
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    h[40..42].copy_from_slice(&(ndim as i16).to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    for i in ndim..7 {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&opts.dtype.code().to_le_bytes());
    h[72..74].copy_from_slice(&((opts.dtype.size() * 8) as i16).to_le_bytes());
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    for i in 0..ndim {
        let s = opts.spacing.get(i).copied().unwrap_or(1.0) as f32;
        h[80 + 4 * i..84 + 4 * i].copy_from_slice(&s.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&(opts.slope as f32).to_le_bytes());
    h[116..120].copy_from_slice(&(opts.inter as f32).to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");

    for &v in volume.data() {
        match opts.dtype {
            NiftiDtype::U8 => h.push(v.round().clamp(0.0, 255.0) as u8),
            NiftiDtype::I16 => h.extend_from_slice(&(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes()),
            NiftiDtype::F32 => h.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(h)
}

/// Writes a NIfTI-1 file, gzip-compressed when the name ends in `.gz`.
pub fn write_nifti(path: &Path, volume: &Tensor, opts: &NiftiWriteOptions) -> Result<()> {
    let bytes = encode_nifti(volume, opts)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}
