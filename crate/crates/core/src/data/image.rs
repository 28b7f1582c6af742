use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{io_err, DataError, Result};
use crate::scalar::Scalar;

/// Square 8-bit RGB frame, row-major `H×H×3`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    size: usize,
    rgb: Vec<u8>,
}

impl Image {
    pub fn filled(size: usize, color: [u8; 3]) -> Self {
        Self {
            size,
            rgb: color.iter().copied().cycle().take(size * size * 3).collect(),
        }
    }

    pub fn from_rgb(size: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != size * size * 3 {
            return Err(DataError::Config(format!(
                "{} bytes cannot form a {size}x{size} RGB image",
                rgb.len()
            )));
        }
        Ok(Self { size, rgb })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.size + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, c: [u8; 3]) {
        let o = (y * self.size + x) * 3;
        self.rgb[o..o + 3].copy_from_slice(&c);
    }

    pub fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, c: [u8; 3]) {
        for y in y0..(y0 + h).min(self.size) {
            for x in x0..(x0 + w).min(self.size) {
                self.set_pixel(y, x, c);
            }
        }
    }

    /// Channel-first `3×H×H` values in `[0, 1]`.
    pub fn to_chw<S: Scalar>(&self) -> Vec<S> {
        let n = self.size * self.size;
        let mut out = vec![S::zero(); 3 * n];
        let inv = S::one() / S::lit(255.0);
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = S::lit(px[c] as f64) * inv;
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are clamped to `[0, 1]` and rounded.
    pub fn from_chw<S: Scalar>(size: usize, chw: &[S]) -> Result<Self> {
        let n = size * size;
        if chw.len() != 3 * n {
            return Err(DataError::Config(format!("{} values cannot form a 3x{size}x{size} image", chw.len())));
        }
        let mut rgb = vec![0u8; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                let v = chw[c * n + p].as_f64();
                let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                rgb[p * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Ok(Self { size, rgb })
    }
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_png_raw(path, img.size as u32, img.size as u32, &img.rgb)
}

/// Writes 8-bit RGB pixels of any shape.
pub fn write_png_raw(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let png_err = |e: png::EncodingError| DataError::Png {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads an 8-bit square RGB or RGBA PNG (alpha is dropped).
pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(DataError::MissingImage(path.display().to_string()));
    }
    let png_err = |reason: String| DataError::Png {
        path: path.display().to_string(),
        reason,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight || info.width != info.height {
        return Err(png_err(format!(
            "expected square 8-bit image, got {}x{} at {:?}",
            info.width, info.height, info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    let rgb = buf[..info.buffer_size()]
        .chunks_exact(channels)
        .flat_map(|px| [px[0], px[1], px[2]])
        .collect();
    Image::from_rgb(info.width as usize, rgb)
}
