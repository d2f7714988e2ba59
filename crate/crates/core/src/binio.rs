//! Flat little-endian `f64` arrays on disk.

use std::fs;
use std::path::Path;

use crate::error::{HocaError, Result};

pub const BYTE_ORDER: &str = "little-endian";
pub const ELEMENT: &str = "f64";

pub fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads exactly `expected` values; any other byte length is a format error.
pub fn read_f64_le(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 8 * expected {
        return Err(HocaError::Format(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            8 * expected
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn check_encoding(byte_order: &str, element: &str) -> Result<()> {
    if byte_order != BYTE_ORDER || element != ELEMENT {
        return Err(HocaError::Format(format!(
            "unsupported encoding {element}/{byte_order}, expected {ELEMENT}/{BYTE_ORDER}"
        )));
    }
    Ok(())
}
