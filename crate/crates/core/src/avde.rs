// SPDX-License-Identifier: MIT OR Apache-2.0

//! `AVDE` binary matrix files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"AVDE" | version: u32 | rows: u32 | cols: u32 | rows*cols f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const MAGIC: &[u8; 4] = b"AVDE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "AVDE header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad AVDE magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported AVDE version {version}")));
    }
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("AVDE shape overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "AVDE {rows}x{cols} needs {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Mat::from_vec(rows, cols, data).map_err(|e| Error::Format(format!("AVDE payload: {e}")))
}

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write(path: &Path, m: &Mat) -> Result<()> {
    write_atomic(path, &encode(m))
}

pub fn read(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
