//! Linear RGB float images and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<[f64; 3]>,
}

impl ImageBuffer {
    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Self {
        Self { width, height, pixels: vec![color; (width * height) as usize] }
    }

    /// Row-major pixels. Channels are clamped into `[0, 1]`.
    pub fn from_pixels(width: u32, height: u32, mut pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("image size must be positive".into()));
        }
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        for p in &mut pixels {
            for c in p.iter_mut() {
                if !c.is_finite() {
                    return Err(Error::NonFinite("image channel".into()));
                }
                *c = c.clamp(0.0, 1.0);
            }
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::from_pixels(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, c: [f64; 3]) {
        self.pixels[(y * self.width + x) as usize] = c.map(|v| v.clamp(0.0, 1.0));
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixels[(y * self.width + x) as usize] = self.get(self.width - 1 - x, y);
            }
        }
        out
    }

    /// `round(clamp(c) · 255)` per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.map(quantize)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != (width * height * 3) as usize {
            return Err(Error::Dimension("rgb8 buffer size".into()));
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Self::from_pixels(width, height, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.to_rgb8(), self.width, self.height, image::ColorType::Rgb8)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        Self::from_rgb8(img.width(), img.height(), img.as_raw())
    }

    /// `"RGBF"`, u32 width, u32 height, then f32 channels, all little-endian.
    /// Keeps renders at full precision between pipeline stages.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.pixels.len() * 12);
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for c in self.pixels.iter().flatten() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
            return Err(Error::Dimension("not a raw float image".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let (width, height) = (word(4), word(8));
        let n = width as usize * height as usize;
        if bytes.len() != 12 + n * 12 {
            return Err(Error::Dimension(format!("raw image {width}x{height} has {} bytes", bytes.len())));
        }
        let pixels = bytes[12..]
            .chunks_exact(12)
            .map(|p| [0, 1, 2].map(|k| f32::from_le_bytes(p[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64))
            .collect();
        Self::from_pixels(width, height, pixels)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Channel values snapped to the 8-bit grid.
    pub fn quantized(&self) -> ImageBuffer {
        let pixels = self.pixels.iter().map(|p| p.map(|c| quantize(c) as f64 / 255.0)).collect();
        ImageBuffer { width: self.width, height: self.height, pixels }
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> f64 {
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .sum();
        sum / (3 * self.pixels.len()) as f64
    }
}

const RAW_MAGIC: &[u8; 4] = b"RGBF";

#[inline]
pub fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}
