//! Binary netpbm I/O: P6 (RGB) and P5 (grayscale), maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn parse_err(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a binary PPM or PGM byte stream.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some(m) => {
            return Err(parse_err(
                0,
                format!("unsupported magic {:?}", String::from_utf8_lossy(m)),
            ))
        }
        None => return Err(parse_err(0, "unsupported magic: file too short")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_pos = {
        h.skip_whitespace_and_comments();
        h.pos
    };
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(h.pos, "expected single whitespace before raster")),
    }
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_err(2, "image dimensions overflow"))?;
    let raster = &bytes[h.pos..];
    if raster.len() < needed {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: expected {needed} bytes, found {}", raster.len()),
        ));
    }
    let data = raster[..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(height, width, channels, data)
}

/// Encodes an image as P6 (3 channels) or P5 (1 channel).
pub fn encode(image: &Image) -> Vec<u8> {
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_two_pixel_ppm() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (1, 2, 3));
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_ascii_ppm() {
        let err = decode(b"P3\n1 1\n255\n0 0 0\n").unwrap_err();
        assert!(err.to_string().contains("unsupported magic"), "{err}");
        assert!(matches!(err, Error::Parse { position: 0, .. }));
    }

    #[test]
    fn rejects_other_maxval() {
        let err = decode(b"P5 1 1 65535\n\0\0").unwrap_err();
        assert!(matches!(err, Error::Parse { position: 7, .. }), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let err = decode(b"P5\n2 2\n255\n\x01\x02\x03").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn header_comments_allowed() {
        let img = decode(b"P5\n# made by hand\n1 # w\n1\n255\n\x80").unwrap();
        assert_eq!(img.data(), &[128.0 / 255.0]);
    }

    #[test]
    fn encode_then_decode_is_byte_exact() {
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 127, 128, 254, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!(encode(&img), bytes);
    }
}
