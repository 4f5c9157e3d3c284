//! `CPTF` binary tensor container with a JSON sidecar.
//!
//! Layout (little-endian, packed, 40-byte header):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"CPTF"`                         |
//! | 4      | 2    | version, `u16` = 1                      |
//! | 6      | 1    | dtype code, `u8` (2 = float64)          |
//! | 7      | 1    | ndim, `u8` = 4                          |
//! | 8      | 32   | dims `(t, x, y, var)` as four `u64`     |
//! | 40     | 8·N  | payload, `f64` row-major                |
//!
//! The sidecar `<name>.json` sits next to `<name>.cpt` and carries the
//! [`GridSpec`] fields, plus any extra metadata the caller attaches.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{FieldTensor, GridSpec};

pub const MAGIC: [u8; 4] = *b"CPTF";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 2;
/// Reserved, not readable or writable yet.
pub const DTYPE_F32: u8 = 1;
pub const NDIM: u8 = 4;
pub const HEADER_LEN: usize = 40;

/// Which non-finite payload values a reader accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finiteness {
    /// Only finite values (field tensors).
    Finite,
    /// `±inf` allowed, NaN rejected (quantiles and interval bounds).
    AllowInfinite,
}

/// Sidecar path for a container: `<name>.cpt` → `<name>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode(dims: [usize; 4], data: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.push(NDIM);
    for d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8], finiteness: Finiteness) -> Result<([usize; 4], Vec<f64>)> {
    if bytes.len() < 4 {
        return Err(Error::LengthMismatch {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::LengthMismatch {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes[6] != DTYPE_F64 {
        return Err(Error::UnsupportedDtype(bytes[6]));
    }
    if bytes[7] != NDIM {
        return Err(Error::UnsupportedRank(bytes[7]));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 8 + i * 8;
        let raw = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(raw).map_err(|_| Error::InvalidSpec(format!("dim {raw} too large")))?;
    }
    let expected = dims
        .iter()
        .try_fold(8u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| Error::InvalidSpec(format!("dims {dims:?} overflow")))?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if expected != found {
        return Err(Error::LengthMismatch { expected, found });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let bad = data.iter().position(|v| match finiteness {
        Finiteness::Finite => !v.is_finite(),
        Finiteness::AllowInfinite => v.is_nan(),
    });
    if let Some(index) = bad {
        return Err(Error::NonFinite {
            index,
            value: data[index],
        });
    }
    Ok((dims, data))
}

/// Writes the binary payload only (no sidecar).
pub fn write_payload(path: &Path, dims: [usize; 4], data: &[f64]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(dims, data))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_payload(path: &Path, finiteness: Finiteness) -> Result<([usize; 4], Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, finiteness)
}

pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| Error::Sidecar {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Sidecar {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn check_dims(spec: &GridSpec, dims: [usize; 4], path: &Path) -> Result<()> {
    spec.validate()?;
    if spec.dims() != dims {
        return Err(Error::SpecMismatch(format!(
            "{}: header dims {dims:?} disagree with sidecar {:?}",
            path.display(),
            spec.dims()
        )));
    }
    Ok(())
}

/// Writes `t` to `path` and its grid spec to the sidecar next to it.
pub fn write_container(t: &FieldTensor, path: &Path) -> Result<()> {
    write_payload(path, t.spec().dims(), t.data())?;
    write_sidecar(&sidecar_path(path), t.spec())
}

pub fn read_container(path: &Path) -> Result<FieldTensor> {
    let (dims, data) = read_payload(path, Finiteness::Finite)?;
    let spec: GridSpec = read_sidecar(&sidecar_path(path))?;
    check_dims(&spec, dims, path)?;
    FieldTensor::new(spec, data)
}
