use std::fs;
use std::path::Path;

use crate::data::is_binary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Rgb = [u8; 3];

pub const TP_COLOR: Rgb = [0, 0, 255];
pub const FP_COLOR: Rgb = [0, 255, 0];
pub const FN_COLOR: Rgb = [255, 255, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl RgbImage {
    pub fn count(&self, color: Rgb) -> usize {
        self.pixels.iter().filter(|&&p| p == color).count()
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::invalid("ppm", msg);
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if data.len() != width * height * 3 {
            return Err(bad("pixel data length does not match header"));
        }
        Ok(Self {
            width,
            height,
            pixels: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Colors true positives, false positives and false negatives over a
/// grayscale rendition of `background` (min-max scaled to 0..=255).
pub fn render_overlay<T: Scalar>(pred: &[T], truth: &[T], background: &[T], height: usize, width: usize) -> Result<RgbImage> {
    let n = height * width;
    for (len, what) in [(pred.len(), "prediction"), (truth.len(), "truth"), (background.len(), "background")] {
        if len != n {
            return Err(Error::invalid("render_overlay", format!("{what} has {len} pixels, expected {n}")));
        }
    }
    if !is_binary(pred) || !is_binary(truth) {
        return Err(Error::invalid("render_overlay", "masks must contain only 0 and 1"));
    }
    let bg: Vec<f64> = background.iter().map(|v| v.to_f64_lossless()).collect();
    let lo = bg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = bg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pixels = (0..n)
        .map(|i| match (pred[i] == T::one(), truth[i] == T::one()) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => {
                let g = if range > 0.0 { ((bg[i] - lo) / range * 255.0).round() as u8 } else { 0 };
                [g, g, g]
            }
        })
        .collect();
    Ok(RgbImage { width, height, pixels })
}
