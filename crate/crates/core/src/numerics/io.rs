//! `LUTN` tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"LUTN" | dtype: u8 | rank: u8 | extents: rank × u64 | values
//! ```
//!
//! dtype 0 is `f64`, 1 is `f32`, 2 is `u8` (label maps). Values are read
//! back as `f64` regardless of the stored width.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LUTN";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::Format(format!(
            "rank {} does not fit in a byte",
            tensor.rank()
        )));
    }
    let mut out = Vec::with_capacity(6 + 8 * tensor.rank() + dtype.width() * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        match dtype {
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::U8 => {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Format(format!(
                        "value {v} is not representable as u8"
                    )));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType)> {
    if bytes.len() < 6 {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let expected = numel
        .checked_mul(dtype.width())
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for shape {shape:?}, found {}",
            bytes.len()
        )));
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((tensor, dtype))
}

pub fn save(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode(tensor, dtype)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes).map(|(t, _)| t)
}
