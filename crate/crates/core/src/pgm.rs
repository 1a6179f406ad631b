//! Binary portable graymap (P5, 8-bit) export and import.
//!
//! Pixel values in `[-1, 1]` map linearly to `0..=255`.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::container::read_file;
use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0 * 2.0 - 1.0
}

/// Encodes a single-channel image (`[.., H, W]` with unit leading dims).
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let sh = image.shape();
    let n = sh.len();
    if n < 2 || sh[..n - 2].iter().any(|&d| d != 1) {
        return Err(Error::InvalidShape {
            op: "pgm_encode",
            shape: sh.to_vec(),
            reason: "expected one grayscale image".into(),
        });
    }
    let (h, w) = (sh[n - 2], sh[n - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes to a `[1, H, W]` tensor in `[-1, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Corrupt("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Corrupt("not a binary PGM (P5)".into()));
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Corrupt(format!("bad PGM header field `{s}`")))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Corrupt(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::Corrupt("truncated PGM raster".into()))?;
    Tensor::new(vec![1, h, w], raster.iter().map(|&q| dequantize(q)).collect())
}

pub fn write(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&read_file(path.as_ref())?)
}
