//! File formats: round-trip decimal numbers, binary matrices and
//! matrix-collection directories.
//!
//! A binary matrix file holds two little-endian `u64` counts (rows, cols)
//! followed by the row-major entries as little-endian `f64`. A collection
//! directory contains such files plus `manifest.json`, which lists the
//! member file names in order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LrnsError, Result};
use crate::linalg::DenseMatrix;

pub const MANIFEST: &str = "manifest.json";

/// 17 significant digits in scientific notation; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Binary matrix file contents.
pub fn matrix_bytes(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.as_slice().len());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    fs::write(path, matrix_bytes(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |what: &str| LrnsError::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("file is shorter than the 16-byte header"));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| bad("header dimensions overflow"))?;
    if bytes.len() - 16 != expected {
        return Err(bad(&format!(
            "expected {expected} bytes of entries for {rows}x{cols}, found {}",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseMatrix::from_row_major(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionManifest {
    pub members: Vec<String>,
}

/// Writes `member_00000.bin`, ... and the manifest into `dir`.
pub fn write_collection(dir: &Path, members: &[DenseMatrix]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(members.len());
    for (m, b) in members.iter().enumerate() {
        let name = format!("member_{m:05}.bin");
        write_matrix(&dir.join(&name), b)?;
        names.push(name);
    }
    write_json(&dir.join(MANIFEST), &CollectionManifest { members: names })
}

pub fn read_collection(dir: &Path) -> Result<Vec<DenseMatrix>> {
    let manifest: CollectionManifest = read_json(&dir.join(MANIFEST))?;
    manifest
        .members
        .iter()
        .map(|name| read_matrix(&dir.join(name)))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    body(&mut out)?;
    out.flush()?;
    Ok(path.to_path_buf())
}
