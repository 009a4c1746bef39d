//! Flat little-endian f32 array files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_f32_le(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` values. A short file is `Truncated`, a long one
/// disagrees with the manifest.
pub fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    if bytes.len() < expected * 4 {
        return Err(Error::Truncated {
            file,
            expected: expected * 4,
            found: bytes.len(),
        });
    }
    if bytes.len() != expected * 4 {
        return Err(Error::ManifestDisagreement {
            what: file,
            manifest: expected,
            actual: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
