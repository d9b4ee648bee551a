//! Binary 8-bit PPM (P6) and PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Raster {
            width,
            height,
            channels: 1,
            pixels,
        }
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), width * height * 3);
        Raster {
            width,
            height,
            channels: 3,
            pixels,
        }
    }

    fn magic(&self) -> &'static str {
        if self.channels == 1 {
            "P5"
        } else {
            "P6"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parse a P5 or P6 file with maxval 255. `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(fail("bad magic; expected P5 or P6".into())),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(fail("truncated or malformed header".into()));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail("header value out of range".into()))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail("missing whitespace after header".into()));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(fail(format!("unsupported maxval {maxval}; only 8-bit 255 is accepted")));
        }
        if width == 0 || height == 0 {
            return Err(fail(format!("empty image {width}x{height}")));
        }
        let need = width * height * channels;
        let body = &bytes[pos..];
        if body.len() < need {
            return Err(fail(format!("expected {need} pixel bytes, found {}", body.len())));
        }
        Ok(Raster {
            width,
            height,
            channels,
            pixels: body[..need].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Scale `values` with min-max normalization to 0..=255. Constant maps
/// (range below `1e-6`) become all zeros.
pub fn normalized_gray(width: usize, height: usize, values: &[f32]) -> Raster {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let pixels = if range > 1e-6 {
        values
            .iter()
            .map(|&v| (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        vec![0; values.len()]
    };
    Raster::gray(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        let p = Path::new("x");
        let g = Raster::gray(3, 2, vec![0, 255, 7, 8, 9, 10]);
        assert_eq!(Raster::decode(&g.encode(), p).unwrap(), g);
        let c = Raster::rgb(2, 1, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(Raster::decode(&c.encode(), p).unwrap(), c);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n# max\n255\n\x01\x02";
        let r = Raster::decode(bytes, Path::new("c.pgm")).unwrap();
        assert_eq!(r.pixels, vec![1, 2]);
    }

    #[test]
    fn rejects_bad_magic_and_short_body() {
        let err = Raster::decode(b"P2\n1 1\n255\n0", Path::new("bad.pgm")).unwrap_err();
        assert!(err.to_string().contains("bad.pgm") && err.to_string().contains("magic"));
        let err = Raster::decode(b"P6\n2 2\n255\n\x00\x00", Path::new("s.ppm")).unwrap_err();
        assert!(err.to_string().contains("expected 12"));
        assert!(Raster::decode(b"P5\n1 1\n65535\n\x00\x00", Path::new("m.pgm")).is_err());
    }

    #[test]
    fn normalized_gray_constant_is_zero() {
        assert!(normalized_gray(2, 2, &[0.3; 4]).pixels.iter().all(|&p| p == 0));
        assert_eq!(normalized_gray(3, 1, &[-1.0, 0.0, 1.0]).pixels, vec![0, 128, 255]);
    }
}
