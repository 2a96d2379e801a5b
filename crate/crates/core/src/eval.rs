//! Image quality metrics: PSNR and single-scale SSIM on `[0, 1]` signals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(img: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    img.same_dims(reference)?;
    let sum: f64 = img
        .pixels()
        .iter()
        .zip(reference.pixels())
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * img.pixels().len()) as f64)
}

/// Peak signal-to-noise ratio in dB for range-1 signals. `+∞` for identical images.
pub fn psnr(img: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(img, reference)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and all fully-contained 11×11 windows.
pub fn ssim(img: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    img.same_dims(reference)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let a: Vec<f64> = img.pixels().iter().map(|p| p[c]).collect();
        let b: Vec<f64> = reference.pixels().iter().map(|p| p[c]).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&a, w, h, &k);
        let mu_b = filter_valid(&b, w, h, &k);
        let e_aa = filter_valid(&aa, w, h, &k);
        let e_bb = filter_valid(&bb, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, images: Vec<ImageMetrics>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|m| m.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n;
        Self { label: label.into(), images, mean_psnr, mean_ssim }
    }

    /// Scores `(name, rendered, reference)` triples.
    pub fn evaluate<'a, I>(label: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, &'a ImageBuffer, &'a ImageBuffer)>,
    {
        let images = pairs
            .into_iter()
            .map(|(name, img, reference)| {
                Ok(ImageMetrics { name, psnr: psnr(img, reference)?, ssim: ssim(img, reference)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(label, images))
    }

    /// One row per image plus a mean row, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tPSNR\tSSIM\n");
        for m in &self.images {
            s.push_str(&format!("{}\t{:.4}\t{:.4}\n", m.name, m.psnr, m.ssim));
        }
        s.push_str(&format!("mean\t{:.4}\t{:.4}\n", self.mean_psnr, self.mean_ssim));
        s
    }
}

/// Summary table with one row per report.
pub fn summary_tsv(reports: &[MetricReport]) -> String {
    let mut s = String::from("method\tPSNR\tSSIM\n");
    for r in reports {
        s.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.label, r.mean_psnr, r.mean_ssim));
    }
    s
}
