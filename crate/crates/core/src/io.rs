//! PFM disparity files, PGM/PPM images and PGM heatmaps.
//!
//! PFM: ASCII header `Pf`, `width height`, `scale` (negative means
//! little-endian), one whitespace byte, then `f32` rows from the bottom of
//! the image to the top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{MapRole, ScalarMap};

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space(&mut self, comments: bool) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if comments && b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str, comments: bool) -> Result<(u64, &'a str)> {
        self.skip_space(comments);
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(start as u64, format!("{what} is not ASCII")))?;
        Ok((start as u64, s))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str, comments: bool) -> Result<T> {
        let (at, s) = self.token(what, comments)?;
        s.parse()
            .map_err(|_| Error::format(at, format!("bad {what} {s:?}")))
    }

    /// Consumes the single whitespace byte that ends a header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(self.pos as u64, "header not terminated by whitespace")),
        }
    }
}

fn dims(h: &mut Header<'_>, comments: bool) -> Result<(usize, usize)> {
    let at = h.pos as u64;
    let w: usize = h.number("width", comments)?;
    let ht: usize = h.number("height", comments)?;
    if w == 0 || ht == 0 {
        return Err(Error::format(at, format!("empty image {w}x{ht}")));
    }
    Ok((w, ht))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ScalarMap> {
    let mut h = Header::new(bytes);
    let (_, magic) = h.token("magic", false)?;
    match magic {
        "Pf" => {}
        "PF" => return Err(Error::format(0, "colour PFM is not supported")),
        other => return Err(Error::format(0, format!("bad magic {other:?}"))),
    }
    let (width, height) = dims(&mut h, false)?;
    let scale_at = h.pos as u64;
    let scale: f64 = h.number("scale", false)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(scale_at, "scale must be non-zero"));
    }
    let start = h.end()?;
    let need = width * height * 4;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload truncated: {} of {need} bytes", payload.len()),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; width * height];
    for (i, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (i / width, i % width);
        data[(height - 1 - row) * width + x] = v as f64;
    }
    ScalarMap::new(height, width, data, MapRole::Generic)
}

/// Little-endian PFM with scale -1.
pub fn encode_pfm(map: &ScalarMap) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("Pf\n{w} {h}\n-1\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.get(y, x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    if map.is_empty() {
        return Err(Error::argument("cannot write an empty map"));
    }
    fs::write(path, encode_pfm(map))?;
    Ok(())
}

/// Binary PGM (P5) or PPM (P6), 8 or 16 bit, scaled to `[0, 1]`. Colour is
/// reduced to luminance with Rec. 601 weights.
pub fn decode_image(bytes: &[u8]) -> Result<ScalarMap> {
    let mut h = Header::new(bytes);
    let (_, magic) = h.token("magic", true)?;
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(0, format!("expected P5 or P6, found {other:?}"))),
    };
    let (width, height) = dims(&mut h, true)?;
    let max_at = h.pos as u64;
    let maxval: u32 = h.number("maxval", true)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(max_at, format!("maxval {maxval} outside 1..=65535")));
    }
    let start = h.end()?;
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = width * height * channels * depth;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload truncated: {} of {need} bytes", payload.len()),
        ));
    }
    let sample = |i: usize| -> f64 {
        let v = if depth == 1 {
            payload[i] as u32
        } else {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u32
        };
        v as f64 / maxval as f64
    };
    let data = (0..width * height)
        .map(|p| {
            if channels == 1 {
                sample(p)
            } else {
                0.299 * sample(3 * p) + 0.587 * sample(3 * p + 1) + 0.114 * sample(3 * p + 2)
            }
        })
        .collect();
    ScalarMap::new(height, width, data, MapRole::Image)
}

pub fn read_image(path: &Path) -> Result<ScalarMap> {
    decode_image(&fs::read(path)?)
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_pgm8(map: &ScalarMap, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v, lo, hi)));
    out
}

/// 8-bit grayscale: `lo` maps to 0, `hi` to 255, clamped outside. Non-finite
/// pixels are written as 0.
pub fn encode_pgm_heatmap(map: &ScalarMap, range: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::argument(format!("bad heatmap range [{lo}, {hi}]")));
    }
    Ok(encode_pgm8(map, lo, hi))
}

pub fn write_pgm_heatmap(path: &Path, map: &ScalarMap, range: (f64, f64)) -> Result<()> {
    fs::write(path, encode_pgm_heatmap(map, range)?)?;
    Ok(())
}

/// Writes an image with intensities in `[0, 1]` as 8-bit PGM.
pub fn write_pgm(path: &Path, image: &ScalarMap) -> Result<()> {
    fs::write(path, encode_pgm8(image, 0.0, 1.0))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> ScalarMap {
        ScalarMap::from_fn(5, 7, MapRole::Disparity, |y, x| (y * 7 + x) as f64 * 0.37 - 3.0)
    }

    fn f32_exact(m: &ScalarMap) -> ScalarMap {
        m.map(m.role(), |v| v as f32 as f64)
    }

    #[test]
    fn pfm_round_trip() {
        let m = f32_exact(&sample_map());
        let back = decode_pfm(&encode_pfm(&m)).unwrap();
        assert_eq!(back.data(), m.data());
        assert_eq!((back.height(), back.width()), (5, 7));
    }

    #[test]
    fn pfm_big_endian_matches_little() {
        let m = f32_exact(&sample_map());
        let mut be = b"Pf\n7 5\n1.0\n".to_vec();
        for y in (0..5).rev() {
            for x in 0..7 {
                be.extend_from_slice(&(m.get(y, x) as f32).to_be_bytes());
            }
        }
        assert_eq!(decode_pfm(&be).unwrap().data(), decode_pfm(&encode_pfm(&m)).unwrap().data());
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let mut bytes = b"Pf\n1 2\n-1\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn pfm_errors_carry_offsets() {
        let e = decode_pfm(b"P5\n1 1\n-1\n").unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }));
        let e = decode_pfm(b"Pf\n2 x\n-1\n").unwrap_err();
        assert!(matches!(e, Error::Format { offset: 5, .. }), "{e}");
        let mut short = b"Pf\n2 2\n-1\n".to_vec();
        short.extend_from_slice(&[0; 9]);
        let len = short.len() as u64;
        assert!(matches!(decode_pfm(&short).unwrap_err(), Error::Format { offset, .. } if offset == len));
        assert!(decode_pfm(b"Pf\n2 2\n0\n").is_err());
        assert!(decode_pfm(b"PF\n1 1\n-1\n").is_err());
    }

    #[test]
    fn heatmap_mid_range_is_128() {
        let m = ScalarMap::filled(3, 4, 5.0, MapRole::Generic);
        let bytes = encode_pgm_heatmap(&m, (0.0, 10.0)).unwrap();
        let img = decode_image(&bytes).unwrap();
        assert!(img.data().iter().all(|&v| ((v * 255.0).round() - 128.0).abs() <= 1.0));
        assert!(encode_pgm_heatmap(&m, (1.0, 1.0)).is_err());
        let clamp = encode_pgm_heatmap(&ScalarMap::new(1, 2, vec![-5.0, 50.0], MapRole::Generic).unwrap(), (0.0, 10.0)).unwrap();
        assert_eq!(&clamp[clamp.len() - 2..], &[0, 255]);
    }

    #[test]
    fn ppm_to_luminance_and_16_bit() {
        let mut ppm = b"P6\n# comment\n2 1\n255\n".to_vec();
        ppm.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_image(&ppm).unwrap();
        assert!((img.data()[0] - 0.299).abs() < 1e-12 && (img.data()[1] - 0.114).abs() < 1e-12);
        let mut pgm = b"P5 1 1 65535\n".to_vec();
        pgm.extend_from_slice(&[0x80, 0x00]);
        assert!((decode_image(&pgm).unwrap().data()[0] - 32768.0 / 65535.0).abs() < 1e-15);
        assert!(decode_image(b"P5 1 1 70000\n\0\0").is_err());
        assert!(decode_image(b"P5 2 2 255\n\0").is_err());
    }
}
