//! Raw little-endian f64 blobs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn f64_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn le_bytes_to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    fs::write(path, f64_to_le_bytes(values)).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` values or fails with the path.
pub fn read_f64_file(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("expected {} bytes ({expected} values), found {}", expected * 8, bytes.len()),
        ));
    }
    Ok(le_bytes_to_f64(&bytes))
}
