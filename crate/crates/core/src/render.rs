//! Ray sampling, space contraction and volume compositing.
//!
//! Rendering happens in a normalized model space: world points are shifted
//! and scaled by a [`SceneNormalization`], contracted into the ball of radius
//! 2, and mapped to the encoder's unit cube with `p ↦ (p + 2) / 4`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{subpixel_ray, CameraPose, Ray};
use crate::decoder::{Appearance, MlpDecoder};
use crate::encoding::HashGrid;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::image::ImageBuffer;

/// Radius of the contracted domain.
pub const CONTRACTED_RADIUS: f64 = 2.0;
pub const DEPTH_EPS: f64 = 1e-10;

/// Identity inside the unit ball, `(2 − 1/‖x‖) x/‖x‖` outside.
#[inline]
pub fn contract(x: Vec3) -> Vec3 {
    let n = x.norm();
    if n <= 1.0 {
        x
    } else {
        x * ((2.0 - 1.0 / n) / n)
    }
}

/// Inverse of [`contract`] for points with norm below 2.
#[inline]
pub fn uncontract(p: Vec3) -> Vec3 {
    let n = p.norm();
    if n <= 1.0 {
        p
    } else {
        let r = 1.0 / (2.0 - n.min(2.0 - 1e-12));
        p * (r / n)
    }
}

/// Contracted ball of radius 2 to the encoder's unit cube.
#[inline]
pub fn to_unit_cube(p: Vec3) -> Vec3 {
    (p + Vec3::splat(CONTRACTED_RADIUS)) / (2.0 * CONTRACTED_RADIUS)
}

/// World → model-space similarity transform: `x ↦ (x − center) · scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub center: Vec3,
    pub scale: f64,
}

impl SceneNormalization {
    pub const IDENTITY: SceneNormalization = SceneNormalization { center: Vec3::ZERO, scale: 1.0 };

    /// Centers the box at the origin and scales its longest side to 1.
    pub fn fit(aabb: &Aabb) -> Self {
        let longest = aabb.extent().max_element();
        let scale = if longest > 0.0 { 1.0 / longest } else { 1.0 };
        Self { center: aabb.center(), scale }
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        (x - self.center) * self.scale
    }

    /// Moves a world ray into model space. Distances are scaled accordingly.
    pub fn ray(&self, ray: &Ray) -> Ray {
        Ray {
            origin: self.apply(ray.origin),
            direction: ray.direction,
            t_near: ray.t_near * self.scale,
            t_far: ray.t_far * self.scale,
        }
    }
}

/// Samples along one ray, in increasing `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaySampleBatch {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl RaySampleBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, t: f64, delta: f64, sigma: f64, color: [f64; 3]) {
        self.t.push(t);
        self.delta.push(delta);
        self.sigma.push(sigma);
        self.color.push(color);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.delta.len() != n || self.sigma.len() != n || self.color.len() != n {
            return Err(Error::InvalidSamples("field lengths differ".into()));
        }
        for i in 0..n {
            if i > 0 && self.t[i] <= self.t[i - 1] {
                return Err(Error::InvalidSamples(format!("t not strictly increasing at sample {i}")));
            }
            if !(self.delta[i] > 0.0) || !self.delta[i].is_finite() {
                return Err(Error::InvalidSamples(format!("interval {i} is {}", self.delta[i])));
            }
            if !(self.sigma[i] >= 0.0) || !self.sigma[i].is_finite() {
                return Err(Error::InvalidSamples(format!("density {i} is {}", self.sigma[i])));
            }
            if !self.color[i].iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::InvalidSamples(format!("color {i} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
}

/// Per-sample compositing weights `w_i = T_i α_i`.
pub fn composite_weights(batch: &RaySampleBatch) -> Vec<f64> {
    let mut trans = 1.0;
    batch
        .sigma
        .iter()
        .zip(&batch.delta)
        .map(|(s, d)| {
            let alpha = 1.0 - (-s * d).exp();
            let w = trans * alpha;
            trans *= 1.0 - alpha;
            w
        })
        .collect()
}

/// Discrete volume rendering of a validated batch over `background`.
pub fn composite(batch: &RaySampleBatch, background: [f64; 3]) -> Result<Composite> {
    batch.validate()?;
    Ok(composite_unchecked(batch, background))
}

pub(crate) fn composite_unchecked(batch: &RaySampleBatch, background: [f64; 3]) -> Composite {
    let weights = composite_weights(batch);
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth = 0.0;
    for ((w, c), t) in weights.iter().zip(&batch.color).zip(&batch.t) {
        for k in 0..3 {
            color[k] += w * c[k];
        }
        opacity += w;
        depth += w * t;
    }
    for k in 0..3 {
        color[k] += (1.0 - opacity) * background[k];
    }
    Composite { color, opacity, depth: depth / opacity.max(DEPTH_EPS) }
}

/// Gradients of `⟨d_color, C⟩` with respect to each sample's density and color.
pub fn composite_backward(
    batch: &RaySampleBatch,
    background: [f64; 3],
    d_color: [f64; 3],
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = batch.len();
    let mut trans = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut t_acc = 1.0;
    trans.push(t_acc);
    for i in 0..n {
        let a = 1.0 - (-batch.sigma[i] * batch.delta[i]).exp();
        weights.push(t_acc * a);
        t_acc *= 1.0 - a;
        trans.push(t_acc);
    }
    // g_i = d_color · (c_i − background)
    let g: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|k| d_color[k] * (batch.color[i][k] - background[k])).sum())
        .collect();
    let mut d_sigma = vec![0.0; n];
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        d_sigma[i] = batch.delta[i] * (trans[i + 1] * g[i] - suffix);
        suffix += weights[i] * g[i];
    }
    let d_c = weights.iter().map(|w| d_color.map(|d| d * w)).collect();
    (d_sigma, d_c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    resolution: usize,
    threshold: f64,
    values: Vec<f64>,
    bitmask: Vec<bool>,
}

pub const DEFAULT_OCCUPANCY_RESOLUTION: usize = 64;
pub const DEFAULT_OCCUPANCY_THRESHOLD: f64 = 1e-2;
pub const DEFAULT_OCCUPANCY_DECAY: f64 = 0.95;

impl OccupancyGrid {
    /// Grid over the contracted cube `[-2, 2]^3`, every cell at `value`.
    pub fn uniform(resolution: usize, threshold: f64, value: f64) -> Self {
        let n = resolution.pow(3);
        Self { resolution, threshold, values: vec![value; n], bitmask: vec![value > threshold; n] }
    }

    pub fn full(resolution: usize) -> Self {
        Self::uniform(resolution, DEFAULT_OCCUPANCY_THRESHOLD, 1.0)
    }

    pub fn empty(resolution: usize) -> Self {
        Self::uniform(resolution, DEFAULT_OCCUPANCY_THRESHOLD, 0.0)
    }

    pub fn from_values(resolution: usize, threshold: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != resolution.pow(3) {
            return Err(Error::Dimension("occupancy value count".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite("occupancy value".into()));
        }
        let bitmask = values.iter().map(|v| *v > threshold).collect();
        Ok(Self { resolution, threshold, values, bitmask })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bitmask(&self) -> &[bool] {
        &self.bitmask
    }

    pub fn occupied_count(&self) -> usize {
        self.bitmask.iter().filter(|b| **b).count()
    }

    pub fn domain() -> Aabb {
        Aabb::new(Vec3::splat(-CONTRACTED_RADIUS), Vec3::splat(CONTRACTED_RADIUS))
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * CONTRACTED_RADIUS / self.resolution as f64
    }

    /// Cell containing a contracted point; `None` outside the domain.
    #[inline]
    pub fn cell_of(&self, p: Vec3) -> Option<usize> {
        let r = self.resolution as f64;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] + CONTRACTED_RADIUS) / (2.0 * CONTRACTED_RADIUS) * r;
            if !(u >= 0.0 && u <= r) {
                return None;
            }
            idx[a] = (u as usize).min(self.resolution - 1);
        }
        Some(idx[0] + self.resolution * (idx[1] + self.resolution * idx[2]))
    }

    pub fn cell_bounds(&self, cell: usize) -> Aabb {
        let r = self.resolution;
        let (i, j, k) = (cell % r, (cell / r) % r, cell / (r * r));
        let s = self.cell_size();
        let lo = Vec3::new(i as f64, j as f64, k as f64) * s - Vec3::splat(CONTRACTED_RADIUS);
        Aabb { lo, hi: lo + Vec3::splat(s) }
    }

    /// Occupancy at a contracted point.
    #[inline]
    pub fn is_occupied(&self, p: Vec3) -> bool {
        self.cell_of(p).is_some_and(|c| self.bitmask[c])
    }

    /// `value ← max(value · decay, σ(random point in cell))`, then refresh the mask.
    /// `density` receives contracted points.
    pub fn update<F, R>(&mut self, density: F, decay: f64, rng: &mut R) -> Result<()>
    where
        F: Fn(Vec3) -> f64 + Sync,
        R: Rng + ?Sized,
    {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("occupancy decay must be in (0, 1), got {decay}")));
        }
        let seed: u64 = rng.gen();
        let r = self.resolution;
        let s = self.cell_size();
        let threshold = self.threshold;
        self.values.par_iter_mut().zip(self.bitmask.par_iter_mut()).enumerate().for_each(
            |(cell, (value, bit))| {
                let mut cell_rng = ChaCha8Rng::seed_from_u64(mix(seed, cell as u64));
                let (i, j, k) = (cell % r, (cell / r) % r, cell / (r * r));
                let u = Vec3::new(
                    i as f64 + cell_rng.gen::<f64>(),
                    j as f64 + cell_rng.gen::<f64>(),
                    k as f64 + cell_rng.gen::<f64>(),
                );
                let p = u * s - Vec3::splat(CONTRACTED_RADIUS);
                let sigma = density(p);
                let sigma = if sigma.is_finite() { sigma.max(0.0) } else { 0.0 };
                *value = (*value * decay).max(sigma);
                *bit = *value > threshold;
            },
        );
        Ok(())
    }
}

/// SplitMix64-style mixing of two words, used to derive independent streams.
#[inline]
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    /// Uniform in `t`.
    Linear,
    /// Uniform in `t` inside the unit ball, uniform in disparity beyond it.
    Contracted,
}

/// How a pixel ray's `[t_near, t_far]` is chosen, in model-space units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RayBounds {
    /// `t_near = near`; `t_far` where the ray reaches `‖x‖ = far_radius`.
    Unbounded { near: f64, far_radius: f64 },
    Fixed { near: f64, far: f64 },
    /// Chord through a sphere; rays that miss it are empty.
    Sphere { center: Vec3, radius: f64 },
}

pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR_RADIUS: f64 = 8.0;

impl RayBounds {
    pub fn bounds(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        match *self {
            RayBounds::Unbounded { near, far_radius } => {
                let far = sphere_exit(origin, dir, Vec3::ZERO, far_radius).unwrap_or(near);
                (far > near).then_some((near, far))
            }
            RayBounds::Fixed { near, far } => (far > near).then_some((near, far)),
            RayBounds::Sphere { center, radius } => {
                let (t0, t1) = sphere_chord(origin, dir, center, radius)?;
                let t0 = t0.max(0.0);
                (t1 > t0).then_some((t0, t1))
            }
        }
    }
}

fn sphere_chord(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Option<(f64, f64)> {
    let oc = o - c;
    let b = oc.dot(d);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc <= 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

fn sphere_exit(o: Vec3, d: Vec3, c: Vec3, r: f64) -> Option<f64> {
    sphere_chord(o, d, c, r).map(|(_, t1)| t1).filter(|t| *t > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Stratified candidate intervals per ray.
    pub max_samples: usize,
    pub spacing: Spacing,
    pub bounds: RayBounds,
    /// Jitter each sample inside its interval; otherwise use the midpoint.
    pub jitter: bool,
    pub background: [f64; 3],
    /// Stop marching once transmittance falls below this value (0 disables).
    pub early_stop: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            max_samples: 256,
            spacing: Spacing::Contracted,
            bounds: RayBounds::Unbounded { near: DEFAULT_NEAR, far_radius: DEFAULT_FAR_RADIUS },
            jitter: false,
            background: [1.0; 3],
            early_stop: 1e-4,
        }
    }
}

struct Warp {
    lin: f64,
}

impl Warp {
    fn new(spacing: Spacing, ray: &Ray) -> Self {
        let lin = match spacing {
            Spacing::Linear => f64::INFINITY,
            Spacing::Contracted => sphere_exit(ray.origin, ray.direction, Vec3::ZERO, 1.0)
                .unwrap_or(ray.t_near)
                .max(ray.t_near),
        };
        Self { lin }
    }

    #[inline]
    fn forward(&self, t: f64) -> f64 {
        if t <= self.lin {
            t
        } else {
            2.0 * self.lin - self.lin * self.lin / t
        }
    }

    #[inline]
    fn inverse(&self, s: f64) -> f64 {
        if s <= self.lin {
            s
        } else {
            self.lin * self.lin / (2.0 * self.lin - s)
        }
    }
}

/// One candidate interval: sample position and interval length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub delta: f64,
}

/// Stratified samples in `[t_near, t_far]` whose contracted position lies in an
/// occupied cell. At most `max_samples`; empty when nothing is occupied.
pub fn sample_ray<R: Rng + ?Sized>(
    ray: &Ray,
    grid: &OccupancyGrid,
    max_samples: usize,
    spacing: Spacing,
    jitter: Option<&mut R>,
) -> Vec<SamplePoint> {
    let mut out = Vec::new();
    sample_ray_into(ray, grid, max_samples, spacing, jitter, &mut out);
    out
}

pub fn sample_ray_into<R: Rng + ?Sized>(
    ray: &Ray,
    grid: &OccupancyGrid,
    max_samples: usize,
    spacing: Spacing,
    mut jitter: Option<&mut R>,
    out: &mut Vec<SamplePoint>,
) {
    out.clear();
    if max_samples == 0 || !(ray.t_far > ray.t_near) {
        return;
    }
    let warp = Warp::new(spacing, ray);
    let s0 = warp.forward(ray.t_near);
    let s1 = warp.forward(ray.t_far);
    let ds = (s1 - s0) / max_samples as f64;
    let mut prev_t = f64::NEG_INFINITY;
    for k in 0..max_samples {
        let lo = s0 + ds * k as f64;
        let u = match jitter.as_deref_mut() {
            Some(rng) => rng.gen::<f64>(),
            None => 0.5,
        };
        let t = warp.inverse(lo + u * ds);
        let delta = warp.inverse(lo + ds) - warp.inverse(lo);
        if !(t > prev_t) || !(delta > 0.0) {
            continue;
        }
        if grid.is_occupied(contract(ray.at(t))) {
            out.push(SamplePoint { t, delta });
            prev_t = t;
        }
    }
}

/// Something that can be volume rendered. Points are in model space, before contraction.
pub trait RadianceField: Sync {
    fn query(&self, x: Vec3, dir: Vec3) -> Result<(f64, [f64; 3])>;
}

/// Hash grid plus decoder evaluated with a fixed appearance vector.
pub struct NeuralField<'a> {
    pub grid: &'a HashGrid,
    pub decoder: &'a MlpDecoder,
    pub appearance: &'a [f64],
}

impl RadianceField for NeuralField<'_> {
    fn query(&self, x: Vec3, dir: Vec3) -> Result<(f64, [f64; 3])> {
        let feature = self.grid.encode(to_unit_cube(contract(x)));
        self.decoder.forward(&feature, dir, Appearance::Fixed(self.appearance))
    }
}

/// Marches one model-space ray through `field` and composites it.
pub fn render_ray<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    ray: &Ray,
    grid: &OccupancyGrid,
    cfg: &RenderConfig,
    jitter: Option<&mut R>,
) -> Result<(Composite, RaySampleBatch)> {
    let samples = sample_ray(ray, grid, cfg.max_samples, cfg.spacing, jitter);
    let mut batch = RaySampleBatch::default();
    let mut trans = 1.0;
    for s in samples {
        let (sigma, color) = field.query(ray.at(s.t), ray.direction)?;
        batch.push(s.t, s.delta, sigma, color);
        trans *= (-sigma * s.delta).exp();
        if trans < cfg.early_stop {
            break;
        }
    }
    Ok((composite(&batch, cfg.background)?, batch))
}

/// Renders every pixel of `pose`. Deterministic for a given `seed`.
pub fn render_image<F: RadianceField + ?Sized>(
    field: &F,
    normalization: &SceneNormalization,
    pose: &CameraPose,
    grid: &OccupancyGrid,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<ImageBuffer> {
    let (w, h) = (pose.width(), pose.height());
    let rows: Vec<Result<Vec<[f64; 3]>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    render_pixel(field, normalization, pose, grid, cfg, seed, x, y)
                        .map_err(|e| Error::NonFinite(format!("pixel ({x}, {y}): {e}")))
                })
                .collect()
        })
        .collect();
    let mut pixels = Vec::with_capacity((w * h) as usize);
    for row in rows {
        pixels.extend(row?);
    }
    ImageBuffer::from_pixels(w, h, pixels)
}

#[allow(clippy::too_many_arguments)]
fn render_pixel<F: RadianceField + ?Sized>(
    field: &F,
    normalization: &SceneNormalization,
    pose: &CameraPose,
    grid: &OccupancyGrid,
    cfg: &RenderConfig,
    seed: u64,
    x: u32,
    y: u32,
) -> Result<[f64; 3]> {
    let ray = model_ray(normalization, pose, x as f64 + 0.5, y as f64 + 0.5, &cfg.bounds);
    let Some(ray) = ray else {
        return Ok(cfg.background);
    };
    let result = if cfg.jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, (y as u64) << 32 | x as u64));
        render_ray(field, &ray, grid, cfg, Some(&mut rng))?
    } else {
        render_ray::<F, ChaCha8Rng>(field, &ray, grid, cfg, None)?
    };
    Ok(result.0.color)
}

/// World pixel ray moved into model space with bounds applied; `None` if empty.
pub fn model_ray(
    normalization: &SceneNormalization,
    pose: &CameraPose,
    u: f64,
    v: f64,
    bounds: &RayBounds,
) -> Option<Ray> {
    let world = subpixel_ray(pose, u, v);
    let origin = normalization.apply(world.origin);
    let (t_near, t_far) = bounds.bounds(origin, world.direction)?;
    Some(Ray { origin, direction: world.direction, t_near, t_far })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(items: &[(f64, f64, f64, [f64; 3])]) -> RaySampleBatch {
        let mut b = RaySampleBatch::default();
        for &(t, d, s, c) in items {
            b.push(t, d, s, c);
        }
        b
    }

    #[test]
    fn contract_examples() {
        assert_eq!(contract(Vec3::new(0.5, 0.0, 0.0)), Vec3::new(0.5, 0.0, 0.0));
        assert_eq!(contract(Vec3::new(2.0, 0.0, 0.0)), Vec3::new(1.5, 0.0, 0.0));
        let mut prev = 0.0;
        for k in 0..40 {
            let r = 1.0 + 1.5f64.powi(k);
            let n = contract(Vec3::new(0.0, r, 0.0)).norm();
            assert!(n > prev && n < 2.0);
            prev = n;
        }
        let p = Vec3::new(3.0, -4.0, 1.0);
        assert!((uncontract(contract(p)) - p).norm() < 1e-9);
    }

    #[test]
    fn composite_examples() {
        let bg = [0.2, 0.4, 0.6];
        let empty = batch(&[(0.1, 0.1, 0.0, [1.0, 0.0, 0.0]), (0.2, 0.1, 0.0, [0.0, 1.0, 0.0])]);
        let c = composite(&empty, bg).unwrap();
        assert_eq!(c.color, bg);
        assert_eq!(c.opacity, 0.0);

        let opaque = batch(&[(1.0, 0.5, 100.0, [0.9, 0.1, 0.3]), (2.0, 0.5, 3.0, [0.0, 1.0, 0.0])]);
        let c = composite(&opaque, bg).unwrap();
        for k in 0..3 {
            assert!((c.color[k] - opaque.color[0][k]).abs() < 1e-9);
        }
        assert!((c.opacity - 1.0).abs() < 1e-9);

        let ln2 = 2f64.ln();
        let (c1, c2) = ([0.8, 0.2, 0.4], [0.1, 0.9, 0.5]);
        let two = batch(&[(0.5, 1.0, ln2, c1), (1.5, 1.0, ln2, c2)]);
        let c = composite(&two, [0.0; 3]).unwrap();
        for k in 0..3 {
            assert!((c.color[k] - (0.5 * c1[k] + 0.25 * c2[k])).abs() < 1e-15);
        }
        assert!((c.opacity - 0.75).abs() < 1e-15);
        assert!((c.depth - (0.5 * 0.5 + 0.25 * 1.5) / 0.75).abs() < 1e-15);

        let none = composite(&RaySampleBatch::default(), bg).unwrap();
        assert_eq!(none.color, bg);
        assert_eq!(none.depth, 0.0);
    }

    #[test]
    fn composite_rejects_unsorted_or_invalid() {
        let b = batch(&[(1.0, 0.1, 1.0, [0.5; 3]), (0.5, 0.1, 1.0, [0.5; 3])]);
        assert!(matches!(composite(&b, [1.0; 3]), Err(Error::InvalidSamples(_))));
        let b = batch(&[(1.0, 0.0, 1.0, [0.5; 3])]);
        assert!(composite(&b, [1.0; 3]).is_err());
        let b = batch(&[(1.0, 0.1, -1.0, [0.5; 3])]);
        assert!(composite(&b, [1.0; 3]).is_err());
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let b = batch(&[
            (0.1, 0.2, 1.3, [0.1, 0.5, 0.9]),
            (0.3, 0.15, 0.4, [0.7, 0.2, 0.3]),
            (0.5, 0.3, 2.2, [0.4, 0.4, 0.1]),
        ]);
        let bg = [1.0, 0.9, 0.8];
        let dc = [0.3, -1.1, 0.7];
        let loss = |b: &RaySampleBatch| {
            let c = composite_unchecked(b, bg).color;
            (0..3).map(|k| dc[k] * c[k]).sum::<f64>()
        };
        let (ds, dcol) = composite_backward(&b, bg, dc);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = b.clone();
            p.sigma[i] += h;
            let mut m = b.clone();
            m.sigma[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-8, "{fd} vs {}", ds[i]);
            for k in 0..3 {
                let mut p = b.clone();
                p.color[i][k] += h;
                let mut m = b.clone();
                m.color[i][k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - dcol[i][k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn occupancy_cells_round_trip() {
        let g = OccupancyGrid::full(8);
        for cell in [0, 7, 63, 100, 511] {
            let b = g.cell_bounds(cell);
            assert_eq!(g.cell_of(b.center()), Some(cell));
        }
        assert_eq!(g.cell_of(Vec3::splat(2.5)), None);
        assert_eq!(g.cell_of(Vec3::splat(2.0)), Some(511));
    }

    #[test]
    fn occupancy_decay_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = OccupancyGrid::uniform(8, 1e-2, 1.0);
        for _ in 0..100 {
            g.update(|_| 0.0, 0.95, &mut rng).unwrap();
        }
        assert_eq!(g.occupied_count(), 0);
        assert!(g.values().iter().all(|v| *v < 0.01 && *v >= 0.0));
        let mut g = OccupancyGrid::empty(8);
        g.update(|_| 50.0, 0.95, &mut rng).unwrap();
        assert_eq!(g.occupied_count(), 512);
        assert!(g.update(|_| 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sampler_full_and_empty_grids() {
        let ray = Ray {
            origin: Vec3::new(0.1, -0.2, 0.3),
            direction: Vec3::new(1.0, 2.0, -0.5).normalized(),
            t_near: 0.05,
            t_far: 6.0,
        };
        let full = OccupancyGrid::full(16);
        for spacing in [Spacing::Linear, Spacing::Contracted] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let s = sample_ray(&ray, &full, 64, spacing, Some(&mut rng));
            assert_eq!(s.len(), 64);
            assert!(s.windows(2).all(|w| w[1].t > w[0].t));
            assert!(s.iter().all(|p| p.t >= ray.t_near && p.t <= ray.t_far && p.delta > 0.0));
            let total: f64 = s.iter().map(|p| p.delta).sum();
            assert!((total - (ray.t_far - ray.t_near)).abs() < 1e-9);
        }
        let empty = OccupancyGrid::empty(16);
        assert!(sample_ray::<ChaCha8Rng>(&ray, &empty, 64, Spacing::Linear, None).is_empty());
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let ray = Ray { origin: Vec3::ZERO, direction: Vec3::new(0.0, 0.0, 1.0), t_near: 0.05, t_far: 4.0 };
        let g = OccupancyGrid::full(16);
        let a = sample_ray(&ray, &g, 32, Spacing::Contracted, Some(&mut ChaCha8Rng::seed_from_u64(5)));
        let b = sample_ray(&ray, &g, 32, Spacing::Contracted, Some(&mut ChaCha8Rng::seed_from_u64(5)));
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_fits_longest_side() {
        let b = Aabb::new(Vec3::new(-1.0, 0.0, 2.0), Vec3::new(3.0, 1.0, 2.5));
        let n = SceneNormalization::fit(&b);
        assert_eq!(n.scale, 0.25);
        assert_eq!(n.apply(b.center()), Vec3::ZERO);
        let e = Aabb::new(n.apply(b.lo), n.apply(b.hi)).extent();
        assert!((e.max_element() - 1.0).abs() < 1e-15);
    }
}
