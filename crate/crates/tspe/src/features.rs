//! Binary feature-matrix files (TSPF).
//!
//! Frame and interaction features ride alongside the JSON annotations as
//! small binary matrices:
//!
//! ```text
//! bytes 0..4   magic "TSPF"
//! bytes 4..8   version, u32 little-endian (currently 1)
//! bytes 8..12  rows, u32 little-endian
//! bytes 12..16 cols, u32 little-endian
//! then         rows * cols f32 values, little-endian, row-major
//! ```
//!
//! Values are stored as f32 and widened to f64 on load, so a
//! write/read/write cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"TSPF";
const VERSION: u32 = 1;

/// Serialize a matrix to TSPF bytes.
pub fn to_tspf_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parse TSPF bytes into a matrix, widening each value to f64.
pub fn from_tspf_bytes(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 16 {
        return Err(Error::Data(format!(
            "feature file too short: {} bytes, need at least 16",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Data(format!(
            "bad feature-file magic {:?}, expected \"TSPF\"",
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported feature-file version {version}, expected {VERSION}"
        )));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "feature file length {} does not match header {rows}x{cols} (expected {expected})",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Matrix::from_vec(rows, cols, data)
}

/// Write a matrix to a TSPF file.
pub fn write_tspf(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, to_tspf_bytes(m))?;
    Ok(())
}

/// Read a TSPF file into a matrix.
pub fn read_tspf(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read feature file {}: {e}", path.display())))?;
    from_tspf_bytes(&bytes)
}
