//! Portable graymap output and small CSV helpers.

use std::fmt::Write as _;
use std::path::Path;

use hdt::Result;

/// 8-bit binary PGM of a row-major image, mapping `[lo, hi]` to `0..=255`.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|&v| {
        let q = ((v - lo) / span * 255.0).round();
        if q.is_nan() {
            0
        } else {
            q.clamp(0.0, 255.0) as u8
        }
    }));
    out
}

/// Writes a PGM scaled to the image's own maximum (minimum zero).
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let hi = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    std::fs::write(path, pgm_bytes(width, height, values, 0.0, hi))?;
    Ok(())
}

/// Writes a PGM with an explicit display window.
pub fn write_pgm_window(path: &Path, width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    std::fs::write(path, pgm_bytes(width, height, values, lo, hi))?;
    Ok(())
}

/// Tiles equally sized square images into one `rows × cols` mosaic.
pub fn mosaic(tiles: &[Vec<Vec<f64>>], size: usize) -> (usize, usize, Vec<f64>) {
    let rows = tiles.len();
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (cols * size, rows * size);
    let mut out = vec![0.0; w * h];
    for (r, row) in tiles.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..size {
                let dst = (r * size + y) * w + c * size;
                out[dst..dst + size].copy_from_slice(&img[y * size..(y + 1) * size]);
            }
        }
    }
    (w, h, out)
}

/// CSV with a header row; floats in exponent notation so reruns compare
/// byte for byte.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: header.join(",") + "\n",
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        writeln!(self.text, "{}", cells.join(",")).expect("string write");
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text)?;
        Ok(())
    }
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}
