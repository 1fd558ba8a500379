//! Binary PGM (P5) reading and writing, and tile grids of feature maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid("pgm", m.to_string());
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_string());
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        pos += 1;
        let data = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated pixel data"))?;
        let pixels = data.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Self {
        Self {
            width,
            height,
            pixels: values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }
}

/// Lays `tiles` (each `h × w`, row-major) out on a `rows × cols` grid with a
/// one-pixel separator. All tiles share one linear intensity scale from the
/// global minimum (black) to the global maximum (white); a constant grid is
/// mid-gray.
pub fn tile_grid(tiles: &[Vec<f32>], rows: usize, cols: usize, h: usize, w: usize) -> Gray {
    assert!(tiles.len() <= rows * cols, "grid too small");
    let (lo, hi) = tiles
        .iter()
        .flatten()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let width = cols * (w + 1) - 1;
    let height = rows * (h + 1) - 1;
    let mut pixels = vec![0u8; width * height];
    for (t, tile) in tiles.iter().enumerate() {
        let (r, c) = (t / cols, t % cols);
        for y in 0..h {
            for x in 0..w {
                let v = tile[y * w + x];
                let g = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 };
                pixels[(r * (h + 1) + y) * width + c * (w + 1) + x] = g;
            }
        }
    }
    Gray { width, height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let g = Gray {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 20, 30, 40, 255],
        };
        assert_eq!(Gray::decode_pgm(&g.encode_pgm()).unwrap(), g);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&g.pixels);
        assert_eq!(Gray::decode_pgm(&commented).unwrap(), g);
        assert!(Gray::decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(Gray::decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn grid_layout_and_scaling() {
        let tiles = vec![vec![0.0; 4], vec![1.0; 4], vec![0.5; 4]];
        let g = tile_grid(&tiles, 1, 3, 2, 2);
        assert_eq!((g.width, g.height), (8, 2));
        assert_eq!(g.pixels[0], 0);
        assert_eq!(g.pixels[3], 255);
        assert_eq!(g.pixels[6], 128);
        let flat = tile_grid(&[vec![2.0; 4], vec![2.0; 4]], 1, 2, 2, 2);
        assert!(flat.pixels.iter().enumerate().all(|(i, &p)| i % 5 == 2 || p == 128));
    }
}
