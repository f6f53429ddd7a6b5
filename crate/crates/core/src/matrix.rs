//! Raw little-endian matrix container.
//!
//! Layout: 8-byte magic, `u32` rows, `u32` cols (16-byte header), then
//! `rows * cols` row-major values. `PLIDMAT1` stores `f32` and is the
//! interchange format for embeddings. `PLIDMATD` stores `f64` and is used for
//! checkpoint tensors so that a reload is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{PlidError, Result};

pub const MAGIC_F32: &[u8; 8] = b"PLIDMAT1";
pub const MAGIC_F64: &[u8; 8] = b"PLIDMATD";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn encode(matrix: &Array2<f64>, precision: Precision) -> Vec<u8> {
    let (rows, cols) = matrix.dim();
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * width);
    out.extend_from_slice(match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    });
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in matrix.iter() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

/// Decodes either container flavour into an `f64` matrix.
pub fn decode(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    let magic = &bytes[..8];
    let width = if magic == MAGIC_F32 {
        4
    } else if magic == MAGIC_F64 {
        8
    } else {
        return Err("bad magic".into());
    };
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or("dimension overflow")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(format!(
            "expected {} payload bytes for {}x{}, found {}",
            expected,
            rows,
            cols,
            body.len()
        ));
    }
    let values: Vec<f64> = if width == 4 {
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}

pub fn write(path: &Path, matrix: &Array2<f64>, precision: Precision) -> Result<()> {
    fs::write(path, encode(matrix, precision)).map_err(|e| PlidError::io(path, e))
}

pub fn read(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| PlidError::Load {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode(&bytes).map_err(|m| PlidError::parse(path, m))
}
