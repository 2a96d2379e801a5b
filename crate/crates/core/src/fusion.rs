//! Fusing per-block renderings of one view into a single image.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::image::ImageBuffer;

#[derive(Debug, Clone)]
pub struct FusionInput {
    pub block_images: Vec<ImageBuffer>,
    /// Mean camera center of each block's members.
    pub block_centroids: Vec<Vec3>,
    pub global_image: Option<ImageBuffer>,
    /// Camera center of the view being fused.
    pub view_center: Vec3,
}

impl FusionInput {
    fn check(&self) -> Result<()> {
        let first = self.block_images.first().ok_or_else(|| Error::Empty("no block images to fuse".into()))?;
        for img in &self.block_images[1..] {
            first.same_dims(img)?;
        }
        if let Some(g) = &self.global_image {
            first.same_dims(g)?;
        }
        Ok(())
    }
}

/// Normalized inverse-distance weights `d_k^(−γ) / Σ d_j^(−γ)`.
/// A block at distance zero takes all the weight.
pub fn idw_weights(distances: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("IDW gamma must be positive, got {gamma}")));
    }
    if distances.is_empty() {
        return Err(Error::Empty("no distances".into()));
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::NonFinite("block distance".into()));
    }
    if let Some(k) = distances.iter().position(|d| *d == 0.0) {
        let mut w = vec![0.0; distances.len()];
        w[k] = 1.0;
        return Ok(w);
    }
    let raw: Vec<f64> = distances.iter().map(|d| d.powf(-gamma)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Pixelwise `Σ ω_k I_k` with distances from the view center to each block centroid.
pub fn idw_blend(input: &FusionInput, gamma: f64) -> Result<ImageBuffer> {
    input.check()?;
    if input.block_centroids.len() != input.block_images.len() {
        return Err(Error::Dimension("one centroid per block image required".into()));
    }
    let distances: Vec<f64> = input.block_centroids.iter().map(|c| c.distance(input.view_center)).collect();
    let weights = idw_weights(&distances, gamma)?;
    let first = &input.block_images[0];
    let n = first.pixels().len();
    let mut pixels = vec![[0.0; 3]; n];
    for (img, w) in input.block_images.iter().zip(&weights) {
        for (out, p) in pixels.iter_mut().zip(img.pixels()) {
            for k in 0..3 {
                out[k] += w * p[k];
            }
        }
    }
    ImageBuffer::from_pixels(first.width(), first.height(), pixels)
}

/// Per pixel, the block color closest (L2 over RGB) to the global rendering.
/// Ties go to the lowest block index. Returns the fused image and the chosen block per pixel.
pub fn global_guided_fuse(input: &FusionInput) -> Result<(ImageBuffer, Vec<usize>)> {
    input.check()?;
    let global = input
        .global_image
        .as_ref()
        .ok_or_else(|| Error::Empty("global-guided fusion needs the global rendering".into()))?;
    let first = &input.block_images[0];
    let n = first.pixels().len();
    let mut pixels = Vec::with_capacity(n);
    let mut selection = Vec::with_capacity(n);
    for i in 0..n {
        let g = global.pixels()[i];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, img) in input.block_images.iter().enumerate() {
            let p = img.pixels()[i];
            let d = (0..3).map(|c| (p[c] - g[c]).powi(2)).sum::<f64>();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        pixels.push(input.block_images[best].pixels()[i]);
        selection.push(best);
    }
    Ok((ImageBuffer::from_pixels(first.width(), first.height(), pixels)?, selection))
}

const PALETTE: [[f64; 3]; 8] = [
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [0.596, 0.306, 0.639],
    [1.000, 0.498, 0.000],
    [1.000, 1.000, 0.200],
    [0.651, 0.337, 0.157],
    [0.969, 0.506, 0.749],
];

/// Block index per pixel rendered with a fixed palette.
pub fn selection_image(width: u32, height: u32, selection: &[usize]) -> Result<ImageBuffer> {
    let pixels = selection.iter().map(|k| PALETTE[k % PALETTE.len()]).collect();
    ImageBuffer::from_pixels(width, height, pixels)
}
