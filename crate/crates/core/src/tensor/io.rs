//! `.t4b` binary tensor files.
//!
//! Layout: the ASCII magic `T4B1`, four little-endian `u32` extents
//! `(n, h, w, k)`, then `n·h·w·k` little-endian IEEE-754 `f64` values in
//! row-major `(n, h, w, k)` order. Nothing follows the payload.

use std::fs;
use std::path::Path;

use super::{Shape4, Tensor};
use crate::error::{Error, Result};

pub const T4B_MAGIC: &[u8; 4] = b"T4B1";
const HEADER_LEN: usize = 4 + 4 * 4;

pub fn encode_t4b(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.len());
    out.extend_from_slice(T4B_MAGIC);
    for extent in t.shape().dims() {
        let e = u32::try_from(extent)
            .map_err(|_| Error::invalid(format!("extent {extent} does not fit in u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a `.t4b` byte buffer; the error string describes what is wrong.
pub fn decode_t4b(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 4 || &bytes[..4] != T4B_MAGIC {
        return Err("bad magic (expected \"T4B1\")".into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header: {} bytes", bytes.len()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| e.to_string())?;
    let expected = shape
        .len()
        .checked_mul(8)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or("payload size overflows")?;
    if bytes.len() < expected {
        return Err(format!(
            "truncated payload: expected {expected} bytes for shape {shape}, found {}",
            bytes.len()
        ));
    }
    if bytes.len() > expected {
        return Err(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_t4b(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_t4b(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_t4b(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_t4b(&bytes).map_err(|reason| Error::format(path, reason))
}
