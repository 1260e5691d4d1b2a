//! `CKPT` checkpoints: magic, `u32` version, `u32` tensor count, then per
//! tensor a `u32`-length UTF-8 name, `u32` rank, `u32` dims and
//! little-endian `f64` values, closed by a CRC32 over all preceding bytes.

use std::collections::HashSet;
use std::path::Path;

use xmodal_core::autodiff::Tensor;

use crate::error::{Result, XmodalError};

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(XmodalError::Config(format!(
                "duplicate tensor name '{name}'"
            )));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(XmodalError::format(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 {
        return Err(XmodalError::format(
            path,
            bytes.len() as u64,
            "file too short for a checkpoint",
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(XmodalError::format(path, 0, "bad magic, expected CKPT"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(XmodalError::format(
            path,
            body_len as u64,
            format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut c = Cursor {
        bytes: &bytes[..body_len],
        pos: 4,
        path,
    };
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(XmodalError::format(
            path,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| XmodalError::format(path, at, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(XmodalError::format(
                path,
                at,
                format!("duplicate tensor '{name}'"),
            ));
        }
        let rank = c.u32("rank")?;
        let shape = (0..rank)
            .map(|_| c.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.saturating_mul(8), "tensor payload")?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, values)?));
    }
    if c.pos != body_len {
        return Err(XmodalError::format(
            path,
            c.pos as u64,
            format!("{} unexpected bytes before the CRC", body_len - c.pos),
        ));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&crate::fsutil::read(path)?, path)
}

/// Atomic write: the final path only ever holds a complete checkpoint.
pub fn write(tensors: &[(String, Tensor)], path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode(tensors)?)
}
