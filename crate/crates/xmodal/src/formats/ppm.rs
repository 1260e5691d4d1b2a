//! Binary PPM (P6, maxval 255).

use std::path::Path;

use xmodal_core::autodiff::Tensor;
use xmodal_core::colorshapes::RgbImage;

use crate::error::{Result, XmodalError};

pub fn encode(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(XmodalError::format(
                self.path,
                start as u64,
                format!("expected {what}"),
            ));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| XmodalError::format(self.path, start as u64, format!("{what} too large")))
    }
}

/// Parses P6 bytes; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(XmodalError::format(path, 0, "bad magic, expected P6"));
    }
    let mut h = Header {
        bytes,
        pos: 2,
        path,
    };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space_and_comments();
    let maxval_at = h.pos as u64;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(XmodalError::format(
            path,
            maxval_at,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(XmodalError::format(path, 2, "zero image dimension"));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(XmodalError::format(
            path,
            h.pos as u64,
            "expected a single whitespace byte before the pixel data",
        ));
    }
    let start = h.pos + 1;
    let need = width * height * 3;
    let have = bytes.len() - start;
    if have < need {
        return Err(XmodalError::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: expected {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(XmodalError::format(
            path,
            (start + need) as u64,
            format!("{} trailing bytes after the payload", have - need),
        ));
    }
    Ok(RgbImage {
        width,
        height,
        data: bytes[start..].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| XmodalError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(image: &RgbImage, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &encode(image))
}

/// Reads an image as a `[3×H×W]` tensor in `[−1, 1]`.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Ok(read(path)?.to_tensor())
}

/// Writes a `[3×H×W]` tensor, quantizing each value.
pub fn write_tensor(image: &Tensor, path: &Path) -> Result<()> {
    write(&RgbImage::from_tensor(image)?, path)
}
