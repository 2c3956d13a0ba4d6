//! Binary portable pixmap (P6) and graymap (P5) I/O, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes `[3, H, W]` as P6, and `[H, W]` or `[1, H, W]` as P5. Values
/// must lie in `[0, 1]`.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let (channels, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(Error::invalid(format!(
                "cannot encode shape {:?} as a portable image",
                image.shape()
            )))
        }
    };
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("image values must lie in [0, 1]"));
    }
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic} {w} {h} 255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(channels * plane);
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(d[c * plane + p]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
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
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("pnm", format!("expected {what}")))
    }
}

/// Decodes P6 into `[3, H, W]` and P5 into `[1, H, W]`, scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 {
        return Err(Error::format("pnm", "file too short"));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::format(
                "pnm",
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::format("pnm", "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("pnm", format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format("pnm", "missing whitespace after header")),
    }
    let pixels = &bytes[cur.pos..];
    let plane = h * w;
    if pixels.len() != plane * channels {
        return Err(Error::format(
            "pnm",
            format!(
                "expected {} pixel bytes, found {}",
                plane * channels,
                pixels.len()
            ),
        ));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; plane * channels];
    for p in 0..plane {
        for c in 0..channels {
            let v = pixels[p * channels + c] as f64 / scale;
            data[c * plane + p] = v.min(1.0);
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

/// Writes a single-channel map as P5 after min-max scaling to `[0, 1]`.
pub fn write_graymap_scaled(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let (h, w) = map.hw()?;
    let scaled = crate::saliency::min_max_normalize(map).reshape(&[h, w])?;
    write_image(path, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn graymap_fixture_bytes() {
        let img = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let bytes = encode(&img).unwrap();
        assert_eq!(bytes, b"P5 2 1 255\n\x00\xff");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.shape(), &[1, 1, 2]);
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn zeros_round_trip_exactly() {
        let img = Tensor::zeros(&[3, 4, 5]);
        assert_eq!(decode(&encode(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x10\x20";
        let t = decode(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert!(decode(b"P3 1 1 255\n1 2 3").is_err());
        assert!(decode(b"P5 2 1 255\n\x00").is_err());
        assert!(decode(b"P5 2 1 65535\n\x00\x00\x00\x00").is_err());
        assert!(decode(b"P5 x 1 255\n\x00").is_err());
        assert!(encode(&Tensor::filled(&[1, 1], 1.5)).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_image("/definitely/not/here.ppm").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.ppm"));
    }

    proptest! {
        #[test]
        fn round_trip_within_quantization(vals in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let img = Tensor::new(vec![3, 2, 2], vals).unwrap();
            let back = decode(&encode(&img).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
