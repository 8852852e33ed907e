//! PNG figures. Every image is computed from the `f32` values that are also
//! written to disk, so re-rendering a stored artifact reproduces it exactly.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{CliError, CliResult};

const LAND: [u8; 3] = [196, 178, 128];
const LONG_SIDE: usize = 480;

pub struct Image {
    pub width: usize,
    pub height: usize,
    rgb: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Image {
            width,
            height,
            rgb: fill.repeat(width * height),
        }
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.put(x, y, c);
            }
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| {
            CliError::new(
                "io",
                crate::error::EXIT_IO,
                format!("{}: {e}", path.display()),
            )
        };
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&self.rgb).map_err(err)?;
        w.finish().map_err(err)
    }
}

fn scale(h: usize, w: usize) -> usize {
    (LONG_SIDE / h.max(w).max(1)).max(1)
}

fn cells(values: &[f32], h: usize, w: usize, color: impl Fn(usize, f32) -> [u8; 3]) -> Image {
    let s = scale(h, w);
    let mut img = Image::new(w * s, h * s, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            img.fill_rect(c * s, r * s, (c + 1) * s, (r + 1) * s, color(i, values[i]));
        }
    }
    img
}

/// Grayscale over the ocean range; land cells drawn in a fixed color.
pub fn field(values: &[f32], h: usize, w: usize, ocean: Option<&[bool]>) -> Image {
    let is_ocean = |i: usize| ocean.is_none_or(|m| m[i]);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if is_ocean(i) && v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    cells(values, h, w, |i, v| {
        if !is_ocean(i) {
            return LAND;
        }
        let t = if span > 0.0 { (v - lo) / span } else { 0.5 };
        let g = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
        [g, g, g]
    })
}

/// Blue–white–red, symmetric about zero with limits ±max|v|.
pub fn diverging(values: &[f32], h: usize, w: usize, ocean: Option<&[bool]>) -> Image {
    let is_ocean = |i: usize| ocean.is_none_or(|m| m[i]);
    let lim = values
        .iter()
        .enumerate()
        .filter(|(i, v)| is_ocean(*i) && v.is_finite())
        .fold(0.0f32, |a, (_, v)| a.max(v.abs()));
    cells(values, h, w, |i, v| {
        if !is_ocean(i) {
            return LAND;
        }
        let t = if lim > 0.0 {
            (v / lim).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        diverge(t)
    })
}

fn diverge(t: f32) -> [u8; 3] {
    let fade = |a: f32| (255.0 * (1.0 - a)).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(-t), fade(-t), 255]
    }
}

/// Monthly bars: positive mass above the axis in red, negative magnitude below in blue.
pub fn contributions(positive: &[f32], negative: &[f32]) -> Image {
    let n = positive.len().max(1);
    let bar = (LONG_SIDE / n).clamp(4, 40);
    let (half, pad) = (120usize, 8usize);
    let width = n * bar + 2 * pad;
    let height = 2 * half + 2 * pad;
    let mut img = Image::new(width, height, [255, 255, 255]);
    let top = positive
        .iter()
        .chain(negative)
        .filter(|v| v.is_finite())
        .fold(0.0f32, |a, v| a.max(v.abs()));
    let axis = pad + half;
    let len = |v: f32| {
        if top > 0.0 && v.is_finite() {
            ((v.abs() / top) * half as f32).round() as usize
        } else {
            0
        }
    };
    for i in 0..positive.len() {
        let x0 = pad + i * bar + 1;
        let x1 = pad + (i + 1) * bar - 1;
        img.fill_rect(x0, axis - len(positive[i]), x1, axis, [214, 39, 40]);
        let neg = negative.get(i).copied().unwrap_or(0.0);
        img.fill_rect(x0, axis, x1, axis + len(neg), [31, 119, 180]);
    }
    img.fill_rect(pad, axis, width - pad, axis + 1, [0, 0, 0]);
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diverging_is_white_at_zero_and_saturated_at_limits() {
        let img = diverging(&[-2.0, 0.0, 2.0, 1.0], 1, 4, None);
        let s = scale(1, 4);
        let at = |c: usize| &img.rgb[3 * (c * s)..3 * (c * s) + 3];
        assert_eq!(at(0), [0, 0, 255]);
        assert_eq!(at(1), [255, 255, 255]);
        assert_eq!(at(2), [255, 0, 0]);
        assert_eq!(at(3), [255, 128, 128]);
    }

    #[test]
    fn field_paints_land() {
        let img = field(&[0.0, 1.0], 1, 2, Some(&[true, false]));
        let s = scale(1, 2);
        assert_eq!(&img.rgb[3 * s..3 * s + 3], LAND);
    }
}
