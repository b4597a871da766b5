//! The binary matrix container shared by features, corpora and checkpoints.
//!
//! Layout: 4-byte magic `AMSP`, `u32` version, `u64` rows, `u64` cols, then
//! `rows × cols` row-major little-endian values. Version 1 stores `f32`,
//! version 2 stores `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

use super::{read_bytes, write_atomic};

pub const MAGIC: [u8; 4] = *b"AMSP";
pub const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn from_version(v: u32) -> Option<Self> {
        match v {
            1 => Some(Precision::F32),
            2 => Some(Precision::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn encode_matrix(m: &DenseMatrix, precision: Precision) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * precision.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&precision.version().to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &x in m.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

/// Decodes one matrix from the front of `bytes`, returning it with the
/// number of bytes consumed. `origin` only labels errors.
pub fn decode_matrix_prefix(bytes: &[u8], origin: &Path) -> Result<(DenseMatrix, usize)> {
    let truncated = |expected: usize| Error::Truncated {
        path: origin.to_path_buf(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(bad_magic(bytes, origin));
        }
        return Err(truncated(HEADER_LEN));
    }
    if bytes[..4] != MAGIC {
        return Err(bad_magic(bytes, origin));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let precision = Precision::from_version(version).ok_or_else(|| Error::BadVersion {
        path: origin.to_path_buf(),
        version,
    })?;
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    if rows == 0 || cols == 0 {
        return Err(Error::Malformed(format!(
            "{}: degenerate {rows}×{cols} matrix",
            origin.display()
        )));
    }
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(precision.width() as u64))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Malformed(format!("{}: {rows}×{cols} overflows", origin.display())))?;
    let end = HEADER_LEN + payload;
    if bytes.len() < end {
        return Err(truncated(end));
    }
    let body = &bytes[HEADER_LEN..end];
    let data: Vec<f64> = match precision {
        Precision::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Precision::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let m = DenseMatrix::new(rows as usize, cols as usize, data)?;
    Ok((m, end))
}

fn bad_magic(bytes: &[u8], origin: &Path) -> Error {
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    Error::BadMagic {
        path: origin.to_path_buf(),
        expected: MAGIC,
        found,
    }
}

/// Decodes a buffer holding exactly one matrix.
pub fn decode_matrix(bytes: &[u8], origin: &Path) -> Result<DenseMatrix> {
    let (m, used) = decode_matrix_prefix(bytes, origin)?;
    if used != bytes.len() {
        return Err(Error::Malformed(format!(
            "{}: {} trailing bytes after matrix payload",
            origin.display(),
            bytes.len() - used
        )));
    }
    Ok(m)
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    decode_matrix(&read_bytes(path)?, path)
}

pub fn save_matrix(path: &Path, m: &DenseMatrix, precision: Precision) -> Result<()> {
    write_atomic(path, &encode_matrix(m, precision))
}
