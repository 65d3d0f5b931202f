//! Portable pixmap output for encoded clips and first-layer filters.

use crate::clipenc::EncodedClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// 8-bit RGB raster.
#[derive(Debug, Clone)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height * 3] }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let base = (y * self.width + x) * 3;
        self.pixels[base..base + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }
}

/// Binary PGM (P5) for single-channel data.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::ShapeError(format!(
            "{} gray bytes for {width}x{height}",
            gray.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(gray)?;
    Ok(())
}

/// Min-max rescale to 0..=255; a constant slice maps to mid-gray.
pub fn rescale_to_u8(values: &[f32]) -> Vec<u8> {
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(max - min).is_normal() {
        return vec![128; values.len()];
    }
    let scale = 255.0 / (max - min);
    values.iter().map(|&v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8).collect()
}

/// One RGB image per 3-channel block of an encoded clip, each block
/// min-max rescaled on its own.
pub fn encoded_clip_images(enc: &EncodedClip) -> Vec<RgbImage> {
    let shape = enc.data.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let blocks = c / 3;
    let data = enc.data.data();
    (0..blocks)
        .map(|block| {
            let mut values = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        values.push(data[(y * w + x) * c + block * 3 + ch]);
                    }
                }
            }
            RgbImage { width: w, height: h, pixels: rescale_to_u8(&values) }
        })
        .collect()
}

/// Display subsampling of kernel input depth: average channel thirds into
/// R, G, B (for 15-channel stack-of-difference trunks that is the mean of
/// five depths per display channel; 3-channel trunks pass through).
fn depth_groups(c_in: usize) -> [(usize, usize); 3] {
    let mut groups = [(0usize, 0usize); 3];
    for (g, slot) in groups.iter_mut().enumerate() {
        let lo = g * c_in / 3;
        let hi = ((g + 1) * c_in / 3).max(lo + 1).min(c_in);
        *slot = (lo.min(c_in - 1), hi);
    }
    groups
}

/// Tile first-layer kernels `(kh, kw, c_in, c_out)` into a square-ish grid,
/// one tile per output channel, each tile min-max rescaled independently.
pub fn filter_grid(kernels: &Tensor, upscale: usize) -> Result<RgbImage> {
    let shape = kernels.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeError(format!(
            "expected kernels of shape (kh, kw, c_in, c_out), got {shape:?}"
        )));
    }
    let (kh, kw, c_in, c_out) = (shape[0], shape[1], shape[2], shape[3]);
    let upscale = upscale.max(1);
    let cols = (c_out as f64).sqrt().ceil() as usize;
    let rows = c_out.div_ceil(cols);
    let tile_h = kh * upscale;
    let tile_w = kw * upscale;
    let mut grid = RgbImage::filled(cols * (tile_w + 1) + 1, rows * (tile_h + 1) + 1, 0);
    let data = kernels.data();
    let groups = depth_groups(c_in);
    for co in 0..c_out {
        // Reduce depth to 3 display channels, then rescale per tile.
        let mut tile = vec![0.0f32; kh * kw * 3];
        for y in 0..kh {
            for x in 0..kw {
                for (g, &(lo, hi)) in groups.iter().enumerate() {
                    let mut acc = 0.0f32;
                    for ci in lo..hi {
                        acc += data[((y * kw + x) * c_in + ci) * c_out + co];
                    }
                    tile[(y * kw + x) * 3 + g] = acc / (hi - lo) as f32;
                }
            }
        }
        let bytes = rescale_to_u8(&tile);
        let base_y = (co / cols) * (tile_h + 1) + 1;
        let base_x = (co % cols) * (tile_w + 1) + 1;
        for y in 0..tile_h {
            for x in 0..tile_w {
                let src = ((y / upscale) * kw + x / upscale) * 3;
                grid.set(
                    base_x + x,
                    base_y + y,
                    [bytes[src], bytes[src + 1], bytes[src + 2]],
                );
            }
        }
    }
    Ok(grid)
}
