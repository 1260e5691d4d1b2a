//! `EMB1` embedding files: magic, `u32` count, `u32` dim, `count·dim`
//! little-endian `f64` values row-major, then `count` `u32` class ids.

use std::path::Path;

use xmodal_core::eval::LabeledEmbeddings;

use crate::error::{Result, XmodalError};

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER: usize = 12;

/// Embedding rows with labels. Unlike the evaluation type this may be
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl EmbeddingFile {
    pub fn from_set(set: &LabeledEmbeddings) -> Self {
        Self {
            dim: set.dim,
            rows: set.embeddings.clone(),
            labels: set.labels.iter().map(|&l| l as u32).collect(),
        }
    }

    pub fn to_set(&self) -> xmodal_core::Result<LabeledEmbeddings> {
        LabeledEmbeddings::new(
            self.rows.clone(),
            self.labels.iter().map(|&l| l as usize).collect(),
        )
    }
}

pub fn encode(file: &EmbeddingFile) -> Vec<u8> {
    let n = file.rows.len();
    let mut out = Vec::with_capacity(HEADER + n * file.dim * 8 + n * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(file.dim as u32).to_le_bytes());
    for row in &file.rows {
        debug_assert_eq!(row.len(), file.dim);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in &file.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<EmbeddingFile> {
    if bytes.len() < HEADER {
        return Err(XmodalError::format(
            path,
            bytes.len() as u64,
            format!(
                "expected a {HEADER}-byte header, file has {} bytes",
                bytes.len()
            ),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(XmodalError::format(path, 0, "bad magic, expected EMB1"));
    }
    let word =
        |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (n, dim) = (word(4), word(8));
    let expected = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(HEADER + n * 4));
    if expected != Some(bytes.len()) {
        return Err(XmodalError::format(
            path,
            bytes.len().min(expected.unwrap_or(usize::MAX)) as u64,
            format!(
                "length mismatch: count {n} and dim {dim} need {} bytes, file has {}",
                expected.map_or("too many".to_string(), |e| e.to_string()),
                bytes.len()
            ),
        ));
    }
    let mut rows = Vec::with_capacity(n);
    let mut at = HEADER;
    for _ in 0..n {
        let row = (0..dim)
            .map(|k| {
                f64::from_le_bytes(
                    bytes[at + 8 * k..at + 8 * k + 8]
                        .try_into()
                        .expect("8 bytes"),
                )
            })
            .collect();
        at += 8 * dim;
        rows.push(row);
    }
    let labels = (0..n).map(|i| word(at + 4 * i) as u32).collect();
    Ok(EmbeddingFile { dim, rows, labels })
}

pub fn read(path: &Path) -> Result<EmbeddingFile> {
    decode(&crate::fsutil::read(path)?, path)
}

pub fn write(file: &EmbeddingFile, path: &Path) -> Result<()> {
    if file.rows.len() != file.labels.len() || file.rows.iter().any(|r| r.len() != file.dim) {
        return Err(XmodalError::Config(format!(
            "inconsistent embedding set for {}",
            path.display()
        )));
    }
    crate::fsutil::write_atomic(path, &encode(file))
}
