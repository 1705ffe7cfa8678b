//! 8-bit binary PGM (P5) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Maps `[0, 1]` to `0..=255` with rounding; values outside are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Gray8 {
    /// Quantizes a `[1, H, W]` or `[H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width) = match *t.shape() {
            [1, h, w] | [h, w] => (h, w),
            ref s => return Err(Error::shape("pgm", format!("expected [1,H,W] or [H,W], got {s:?}"))),
        };
        Ok(Self {
            width,
            height,
            pixels: t.data().iter().map(|&v| quantize(v)).collect(),
        })
    }

    /// `[1, H, W]` with values `p / 255`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )
        .expect("pixel count matches dimensions")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("pgm: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments between header fields
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit graymaps are supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(bad("truncated raster"));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + n].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let img = Gray8 {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 20, 200, 255, 32],
        };
        assert_eq!(Gray8::from_bytes(&img.to_bytes()).unwrap(), img);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(Gray8::from_bytes(&commented).unwrap(), img);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(Gray8::from_bytes(b"P2\n1 1\n255\n0").is_err());
        assert!(Gray8::from_bytes(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Gray8::from_bytes(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(2.0), 255);
    }
}
