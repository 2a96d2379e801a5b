//! Shallow MLP decoder from hash features to density and color.
//!
//! The network has two branches. The density branch reads only the hash
//! feature and produces one density logit plus a 15-wide geometry feature.
//! The color branch reads the geometry feature, a spherical-harmonics encoding
//! of the view direction and the per-image appearance embedding. Hidden layers
//! use ReLU; density goes through softplus (or exp) and color through sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const GEO_FEATURES: usize = 15;
/// Layers in the density branch; the rest belong to the color branch.
pub const DENSITY_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityActivation {
    Softplus,
    /// `exp` with the logit clamped at 15.
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Total linear layers over both branches.
    pub depth: usize,
    pub width: usize,
    pub appearance_dim: usize,
    /// Spherical-harmonics degree; 0 disables view dependence.
    pub view_encoding_degree: u32,
    pub density_activation: DensityActivation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            width: 128,
            appearance_dim: 8,
            view_encoding_degree: 4,
            density_activation: DensityActivation::Softplus,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < DENSITY_LAYERS + 1 {
            return Err(Error::Config(format!("decoder depth must be at least 3, got {}", self.depth)));
        }
        if self.width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        if self.view_encoding_degree > 4 {
            return Err(Error::Config("view encoding degree must be at most 4".into()));
        }
        Ok(())
    }

    pub fn sh_dim(&self) -> usize {
        (self.view_encoding_degree * self.view_encoding_degree) as usize
    }

    pub fn color_input_dim(&self) -> usize {
        GEO_FEATURES + self.sh_dim() + self.appearance_dim
    }

    /// `(in, out)` of every linear layer, density branch first.
    pub fn layer_dims(&self, feature_dim: usize) -> Vec<(usize, usize)> {
        let w = self.width;
        let mut dims = vec![(feature_dim, w), (w, 1 + GEO_FEATURES), (self.color_input_dim(), w)];
        for _ in 0..self.depth - DENSITY_LAYERS - 2 {
            dims.push((w, w));
        }
        dims.push((w, 3));
        dims
    }
}

/// Real spherical harmonics up to `degree` (`degree²` values) of a unit direction.
pub fn sh_encode(degree: u32, d: Vec3, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    if degree == 0 {
        return;
    }
    out[0] = 0.282_094_791_773_878_14;
    if degree <= 1 {
        return;
    }
    out[1] = -0.488_602_511_902_919_9 * y;
    out[2] = 0.488_602_511_902_919_9 * z;
    out[3] = -0.488_602_511_902_919_9 * x;
    if degree <= 2 {
        return;
    }
    out[4] = 1.092_548_430_592_079_2 * xy;
    out[5] = -1.092_548_430_592_079_2 * yz;
    out[6] = 0.946_174_695_757_56 * zz - 0.315_391_565_252_52;
    out[7] = -1.092_548_430_592_079_2 * xz;
    out[8] = 0.546_274_215_296_039_6 * (xx - yy);
    if degree <= 3 {
        return;
    }
    out[9] = 0.590_043_589_926_643_5 * y * (-3.0 * xx + yy);
    out[10] = 2.890_611_442_640_554 * xy * z;
    out[11] = 0.457_045_799_464_465_7 * y * (1.0 - 5.0 * zz);
    out[12] = 0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0);
    out[13] = 0.457_045_799_464_465_7 * x * (1.0 - 5.0 * zz);
    out[14] = 1.445_305_721_320_277 * z * (xx - yy);
    out[15] = 0.590_043_589_926_643_5 * x * (-xx + 3.0 * yy);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    in_dim: usize,
    out_dim: usize,
    w_off: usize,
    b_off: usize,
}

/// Read-only view of one linear layer: `y = W x + b`, `W` row-major `out × in`.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDecoder {
    config: DecoderConfig,
    feature_dim: usize,
    layers: Vec<Layer>,
    /// Offset of each layer's input inside [`DecoderCache`].
    in_offsets: Vec<usize>,
    params: Vec<f64>,
    /// `rows × appearance_dim`.
    appearance: Vec<f64>,
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

const EXP_CLAMP: f64 = 15.0;

/// Activations saved by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct DecoderCache {
    /// Layer inputs, one slice per layer, concatenated.
    inputs: Vec<f64>,
    /// Raw output of the last density layer and of the last color layer.
    density_out: Vec<f64>,
    color_logits: [f64; 3],
    pub sigma: f64,
    pub color: [f64; 3],
    appearance_row: Option<usize>,
}

/// Gradients of one backward pass, accumulated by the caller.
#[derive(Debug, Clone)]
pub struct DecoderGrad {
    pub params: Vec<f64>,
    /// Sparse appearance gradient: `(row, gradient)`.
    pub appearance: Vec<(usize, Vec<f64>)>,
}

impl DecoderGrad {
    pub fn zeros_like(dec: &MlpDecoder) -> Self {
        Self { params: vec![0.0; dec.params.len()], appearance: Vec::new() }
    }

    pub fn add_appearance(&mut self, row: usize, g: &[f64]) {
        match self.appearance.iter_mut().find(|(r, _)| *r == row) {
            Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.appearance.push((row, g.to_vec())),
        }
    }

    pub fn merge(&mut self, other: &DecoderGrad) {
        self.params.iter_mut().zip(&other.params).for_each(|(a, b)| *a += b);
        for (row, g) in &other.appearance {
            self.add_appearance(*row, g);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.params.iter().all(|g| *g == 0.0) && self.appearance.iter().all(|(_, g)| g.iter().all(|v| *v == 0.0))
    }
}

/// Which embedding conditions a decode.
#[derive(Debug, Clone, Copy)]
pub enum Appearance<'a> {
    /// A training image's table row (gradients flow into it).
    Row(usize),
    /// A fixed vector, e.g. the mean embedding for novel views.
    Fixed(&'a [f64]),
}

impl MlpDecoder {
    /// He-uniform weights, zero biases, zero appearance table.
    pub fn new<R: Rng + ?Sized>(
        config: DecoderConfig,
        feature_dim: usize,
        appearance_rows: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dec = Self::zeros(config, feature_dim, appearance_rows)?;
        for layer in dec.layers.clone() {
            let bound = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut dec.params[layer.w_off..layer.w_off + layer.in_dim * layer.out_dim] {
                *w = rng.gen_range(-bound..bound) as f32 as f64;
            }
        }
        Ok(dec)
    }

    pub fn zeros(config: DecoderConfig, feature_dim: usize, appearance_rows: usize) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("decoder feature dimension must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for (in_dim, out_dim) in config.layer_dims(feature_dim) {
            let w_off = off;
            let b_off = w_off + in_dim * out_dim;
            off = b_off + out_dim;
            layers.push(Layer { in_dim, out_dim, w_off, b_off });
        }
        let in_offsets = layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.in_dim;
                Some(o)
            })
            .collect();
        Ok(Self {
            config,
            feature_dim,
            layers,
            in_offsets,
            params: vec![0.0; off],
            appearance: vec![0.0; appearance_rows * config.appearance_dim],
        })
    }

    pub fn from_parts(
        config: DecoderConfig,
        feature_dim: usize,
        params: Vec<f64>,
        appearance: Vec<f64>,
    ) -> Result<Self> {
        if config.appearance_dim > 0 && appearance.len() % config.appearance_dim != 0 {
            return Err(Error::Dimension("appearance table is not a whole number of rows".into()));
        }
        let rows = appearance.len().checked_div(config.appearance_dim).unwrap_or(0);
        let mut dec = Self::zeros(config, feature_dim, rows)?;
        if params.len() != dec.params.len() {
            return Err(Error::Dimension(format!(
                "decoder expects {} parameters, got {}",
                dec.params.len(),
                params.len()
            )));
        }
        if params.iter().chain(&appearance).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder parameter".into()));
        }
        dec.params = params;
        dec.appearance = appearance;
        Ok(dec)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn appearance_table(&self) -> &[f64] {
        &self.appearance
    }

    pub fn appearance_table_mut(&mut self) -> &mut [f64] {
        &mut self.appearance
    }

    pub fn appearance_rows(&self) -> usize {
        self.appearance.len().checked_div(self.config.appearance_dim).unwrap_or(0)
    }

    pub fn appearance_row(&self, row: usize) -> &[f64] {
        let d = self.config.appearance_dim;
        &self.appearance[row * d..(row + 1) * d]
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    pub fn layer(&self, i: usize) -> LayerView<'_> {
        let l = self.layers[i];
        LayerView {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            weights: &self.params[l.w_off..l.b_off],
            bias: &self.params[l.b_off..l.b_off + l.out_dim],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Trainable parameter count including the appearance table.
    pub fn parameter_count(&self) -> usize {
        self.params.len() + self.appearance.len()
    }

    /// Deep copy used to hand each block its own decoder.
    pub fn clone_decoder(&self) -> MlpDecoder {
        self.clone()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.iter().chain(&self.appearance) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    pub fn mean_appearance(&self) -> Result<Vec<f64>> {
        let rows = self.appearance_rows();
        if rows == 0 {
            return Err(Error::Empty("appearance table has no rows".into()));
        }
        let d = self.config.appearance_dim;
        let mut mean = vec![0.0; d];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(self.appearance_row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        Ok(mean)
    }

    #[inline]
    fn linear(&self, layer: Layer, input: &[f64], out: &mut [f64]) {
        let w = &self.params[layer.w_off..layer.b_off];
        let b = &self.params[layer.b_off..layer.b_off + layer.out_dim];
        for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(layer.in_dim).zip(b)) {
            *o = bias + dot(row, input);
        }
    }

    /// Sets the bias of the density logit, e.g. to start from a nearly empty field.
    pub fn set_density_bias(&mut self, value: f64) {
        let off = self.layers[1].b_off;
        self.params[off] = value;
    }

    /// Density only, skipping the color branch.
    pub fn density(&self, feature: &[f64]) -> f64 {
        let l0 = self.layers[0];
        let mut h = vec![0.0; l0.out_dim];
        self.linear(l0, feature, &mut h);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let l1 = self.layers[1];
        let z = self.params[l1.b_off] + dot(&self.params[l1.w_off..l1.w_off + l1.in_dim], &h);
        self.density_act(z).0
    }

    #[inline]
    fn density_act(&self, z: f64) -> (f64, f64) {
        match self.config.density_activation {
            DensityActivation::Softplus => (softplus(z), sigmoid(z)),
            DensityActivation::Exp => {
                if z > EXP_CLAMP {
                    (EXP_CLAMP.exp(), 0.0)
                } else {
                    let e = z.exp();
                    (e, e)
                }
            }
        }
    }

    pub fn forward(&self, feature: &[f64], view_dir: Vec3, appearance: Appearance<'_>) -> Result<(f64, [f64; 3])> {
        let mut cache = DecoderCache::default();
        self.forward_cached(feature, view_dir, appearance, &mut cache)?;
        Ok((cache.sigma, cache.color))
    }

    /// Forward pass that keeps the activations needed by [`MlpDecoder::backward`].
    pub fn forward_cached(
        &self,
        feature: &[f64],
        view_dir: Vec3,
        appearance: Appearance<'_>,
        cache: &mut DecoderCache,
    ) -> Result<()> {
        if feature.len() != self.feature_dim {
            return Err(Error::Dimension(format!(
                "decoder feature has {} values, expected {}",
                feature.len(),
                self.feature_dim
            )));
        }
        if !feature.iter().all(|v| v.is_finite()) || !view_dir.is_finite() {
            return Err(Error::NonFinite("decoder input".into()));
        }
        let app: &[f64] = match appearance {
            Appearance::Row(r) => {
                if r >= self.appearance_rows() {
                    return Err(Error::Dimension(format!("appearance row {r} out of range")));
                }
                self.appearance_row(r)
            }
            Appearance::Fixed(v) => {
                if v.len() != self.config.appearance_dim {
                    return Err(Error::Dimension("appearance vector length".into()));
                }
                v
            }
        };
        cache.appearance_row = match appearance {
            Appearance::Row(r) => Some(r),
            Appearance::Fixed(_) => None,
        };

        let total_in: usize = self.layers.iter().map(|l| l.in_dim).sum();
        cache.inputs.clear();
        cache.inputs.resize(total_in, 0.0);
        cache.density_out.clear();
        cache.density_out.resize(1 + GEO_FEATURES, 0.0);

        let offsets = &self.in_offsets;

        // Density branch.
        cache.inputs[..self.feature_dim].copy_from_slice(feature);
        {
            let l0 = self.layers[0];
            let (head, tail) = cache.inputs.split_at_mut(offsets[1]);
            self.linear(l0, &head[..l0.in_dim], &mut tail[..l0.out_dim]);
            tail[..l0.out_dim].iter_mut().for_each(|v| *v = v.max(0.0));
        }
        {
            let l1 = self.layers[1];
            let input = &cache.inputs[offsets[1]..offsets[1] + l1.in_dim];
            let mut out = std::mem::take(&mut cache.density_out);
            self.linear(l1, input, &mut out);
            cache.density_out = out;
        }
        let (sigma, _) = self.density_act(cache.density_out[0]);

        // Color branch input: geometry feature, view encoding, appearance.
        {
            let sh = self.config.sh_dim();
            let c_in = &mut cache.inputs[offsets[2]..offsets[2] + self.layers[2].in_dim];
            c_in[..GEO_FEATURES].copy_from_slice(&cache.density_out[1..]);
            sh_encode(self.config.view_encoding_degree, view_dir, &mut c_in[GEO_FEATURES..GEO_FEATURES + sh]);
            c_in[GEO_FEATURES + sh..].copy_from_slice(app);
        }
        let last = self.layers.len() - 1;
        for i in DENSITY_LAYERS..last {
            let l = self.layers[i];
            let (head, tail) = cache.inputs.split_at_mut(offsets[i + 1]);
            let out = &mut tail[..l.out_dim];
            self.linear(l, &head[offsets[i]..offsets[i] + l.in_dim], out);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let ll = self.layers[last];
        let mut logits = [0.0; 3];
        self.linear(ll, &cache.inputs[offsets[last]..offsets[last] + ll.in_dim], &mut logits);
        cache.color_logits = logits;
        cache.sigma = sigma;
        cache.color = logits.map(sigmoid);
        Ok(())
    }

    /// Reverse pass for upstream `(dσ, dc)`. Adds into `grad` and writes the
    /// feature gradient into `d_feature`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_sigma: f64,
        d_color: [f64; 3],
        grad: &mut DecoderGrad,
        d_feature: &mut [f64],
    ) {
        let offsets = &self.in_offsets;
        let last = self.layers.len() - 1;

        let mut upstream: Vec<f64> =
            (0..3).map(|k| d_color[k] * cache.color[k] * (1.0 - cache.color[k])).collect();
        let mut d_in = Vec::new();
        for i in (DENSITY_LAYERS..=last).rev() {
            let l = self.layers[i];
            let input = &cache.inputs[offsets[i]..offsets[i] + l.in_dim];
            self.linear_backward(l, input, &upstream, grad, &mut d_in);
            if i > DENSITY_LAYERS {
                // The input of layer i is the ReLU output of layer i-1.
                for (d, x) in d_in.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            std::mem::swap(&mut upstream, &mut d_in);
        }
        // `upstream` now holds d(color input).
        let sh = self.config.sh_dim();
        if let Some(row) = cache.appearance_row {
            let g = &upstream[GEO_FEATURES + sh..];
            if g.iter().any(|v| *v != 0.0) || d_sigma != 0.0 || d_color.iter().any(|v| *v != 0.0) {
                grad.add_appearance(row, g);
            }
        }
        let (_, dsig_dz) = self.density_act(cache.density_out[0]);
        let mut d_density_out = Vec::with_capacity(1 + GEO_FEATURES);
        d_density_out.push(d_sigma * dsig_dz);
        d_density_out.extend_from_slice(&upstream[..GEO_FEATURES]);

        let l1 = self.layers[1];
        let h1 = &cache.inputs[offsets[1]..offsets[1] + l1.in_dim];
        self.linear_backward(l1, h1, &d_density_out, grad, &mut d_in);
        for (d, x) in d_in.iter_mut().zip(h1) {
            if *x <= 0.0 {
                *d = 0.0;
            }
        }
        let l0 = self.layers[0];
        let feat = &cache.inputs[..l0.in_dim];
        let mut d_feat = Vec::new();
        self.linear_backward(l0, feat, &d_in, grad, &mut d_feat);
        d_feature.copy_from_slice(&d_feat);
    }

    #[inline]
    fn linear_backward(&self, l: Layer, input: &[f64], d_out: &[f64], grad: &mut DecoderGrad, d_in: &mut Vec<f64>) {
        d_in.clear();
        d_in.resize(l.in_dim, 0.0);
        let w = &self.params[l.w_off..l.b_off];
        let (gw, gb) = grad.params[l.w_off..l.b_off + l.out_dim].split_at_mut(l.in_dim * l.out_dim);
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &w[o * l.in_dim..(o + 1) * l.in_dim];
            let grow = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
            for ((gw, di), (wv, x)) in grow.iter_mut().zip(d_in.iter_mut()).zip(row.iter().zip(input)) {
                *gw += g * x;
                *di += g * wv;
            }
        }
    }
}

/// Per-sample conditioning of a batched decode.
#[derive(Debug, Clone, Copy)]
pub enum BatchAppearance<'a> {
    /// One table row per sample.
    Rows(&'a [usize]),
    /// The same fixed vector for every sample.
    Fixed(&'a [f64]),
}

/// Activations of a batched forward pass, stored as row-major `n × dim` matrices.
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    n: usize,
    inputs: Vec<Vec<f64>>,
    density_out: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    rows: Vec<usize>,
    upstream: Vec<f64>,
    d_in: Vec<f64>,
}

impl BatchCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

impl MlpDecoder {
    /// `y = x Wᵀ + b` over `n` rows.
    fn gemm_forward(&self, l: Layer, x: &[f64], n: usize, y: &mut [f64]) {
        assert!(x.len() >= n * l.in_dim && y.len() >= n * l.out_dim);
        let b = &self.params[l.b_off..l.b_off + l.out_dim];
        for row in y[..n * l.out_dim].chunks_exact_mut(l.out_dim) {
            row.copy_from_slice(b);
        }
        if n == 0 {
            return;
        }
        let w = &self.params[l.w_off..l.b_off];
        // SAFETY: the lengths are checked above and the strides describe
        // x (n × in), Wᵀ (in × out) and y (n × out) inside those slices.
        unsafe {
            matrixmultiply::dgemm(
                n,
                l.in_dim,
                l.out_dim,
                1.0,
                x.as_ptr(),
                l.in_dim as isize,
                1,
                w.as_ptr(),
                1,
                l.in_dim as isize,
                1.0,
                y.as_mut_ptr(),
                l.out_dim as isize,
                1,
            );
        }
    }

    /// Adds `dYᵀ X` and the column sums of `dY` into the layer gradient and
    /// writes `dX = dY W`.
    fn gemm_backward(&self, l: Layer, x: &[f64], dy: &[f64], n: usize, grad: &mut [f64], dx: &mut Vec<f64>) {
        assert!(x.len() >= n * l.in_dim && dy.len() >= n * l.out_dim);
        dx.clear();
        dx.resize(n * l.in_dim, 0.0);
        if n == 0 {
            return;
        }
        let (gw, gb) = grad[l.w_off..l.b_off + l.out_dim].split_at_mut(l.in_dim * l.out_dim);
        for row in dy[..n * l.out_dim].chunks_exact(l.out_dim) {
            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let w = &self.params[l.w_off..l.b_off];
        // SAFETY: lengths checked above; gw is out × in, dYᵀ is out × n read
        // through swapped strides, dX is n × in.
        unsafe {
            matrixmultiply::dgemm(
                l.out_dim,
                n,
                l.in_dim,
                1.0,
                dy.as_ptr(),
                1,
                l.out_dim as isize,
                x.as_ptr(),
                l.in_dim as isize,
                1,
                1.0,
                gw.as_mut_ptr(),
                l.in_dim as isize,
                1,
            );
            matrixmultiply::dgemm(
                n,
                l.out_dim,
                l.in_dim,
                1.0,
                dy.as_ptr(),
                l.out_dim as isize,
                1,
                w.as_ptr(),
                l.in_dim as isize,
                1,
                0.0,
                dx.as_mut_ptr(),
                l.in_dim as isize,
                1,
            );
        }
    }

    /// Density of `n` features (row-major `n × feature_dim`) into `out`.
    pub fn density_batch(&self, features: &[f64], out: &mut Vec<f64>, scratch: &mut BatchCache) -> Result<()> {
        let n = self.check_features(features)?;
        let (l0, l1) = (self.layers[0], self.layers[1]);
        scratch.upstream.resize(n * l0.out_dim, 0.0);
        self.gemm_forward(l0, features, n, &mut scratch.upstream);
        scratch.upstream.iter_mut().for_each(|v| *v = v.max(0.0));
        scratch.d_in.resize(n * l1.out_dim, 0.0);
        self.gemm_forward(l1, &scratch.upstream, n, &mut scratch.d_in);
        out.clear();
        out.extend(scratch.d_in.chunks_exact(l1.out_dim).map(|r| self.density_act(r[0]).0));
        Ok(())
    }

    fn check_features(&self, features: &[f64]) -> Result<usize> {
        if features.len() % self.feature_dim != 0 {
            return Err(Error::Dimension(format!(
                "batch of {} values is not a whole number of {}-wide features",
                features.len(),
                self.feature_dim
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("decoder input".into()));
        }
        Ok(features.len() / self.feature_dim)
    }

    /// Batched [`MlpDecoder::forward_cached`] over `n` samples.
    pub fn forward_batch(
        &self,
        features: &[f64],
        dirs: &[Vec3],
        appearance: BatchAppearance<'_>,
        cache: &mut BatchCache,
    ) -> Result<()> {
        let n = self.check_features(features)?;
        if dirs.len() != n {
            return Err(Error::Dimension(format!("{} directions for {n} samples", dirs.len())));
        }
        if !dirs.iter().all(|d| d.is_finite()) {
            return Err(Error::NonFinite("decoder input".into()));
        }
        let app_dim = self.config.appearance_dim;
        cache.rows.clear();
        match appearance {
            BatchAppearance::Rows(rows) => {
                if rows.len() != n {
                    return Err(Error::Dimension(format!("{} appearance rows for {n} samples", rows.len())));
                }
                if let Some(r) = rows.iter().find(|r| **r >= self.appearance_rows()) {
                    return Err(Error::Dimension(format!("appearance row {r} out of range")));
                }
                cache.rows.extend_from_slice(rows);
            }
            BatchAppearance::Fixed(v) => {
                if v.len() != app_dim {
                    return Err(Error::Dimension("appearance vector length".into()));
                }
            }
        }
        cache.n = n;
        cache.inputs.resize_with(self.layers.len(), Vec::new);
        for (buf, l) in cache.inputs.iter_mut().zip(&self.layers) {
            buf.clear();
            buf.resize(n * l.in_dim, 0.0);
        }
        cache.inputs[0].copy_from_slice(features);

        let (l0, l1) = (self.layers[0], self.layers[1]);
        {
            let (head, tail) = cache.inputs.split_at_mut(1);
            self.gemm_forward(l0, &head[0], n, &mut tail[0]);
            tail[0].iter_mut().for_each(|v| *v = v.max(0.0));
        }
        cache.density_out.clear();
        cache.density_out.resize(n * l1.out_dim, 0.0);
        self.gemm_forward(l1, &cache.inputs[1], n, &mut cache.density_out);
        cache.sigma.clear();
        cache.sigma.extend(cache.density_out.chunks_exact(l1.out_dim).map(|r| self.density_act(r[0]).0));

        let sh = self.config.sh_dim();
        let c_dim = self.layers[2].in_dim;
        for (s, c_in) in cache.inputs[2].chunks_exact_mut(c_dim).enumerate() {
            c_in[..GEO_FEATURES].copy_from_slice(&cache.density_out[s * l1.out_dim + 1..(s + 1) * l1.out_dim]);
            sh_encode(self.config.view_encoding_degree, dirs[s], &mut c_in[GEO_FEATURES..GEO_FEATURES + sh]);
            let app = match appearance {
                BatchAppearance::Rows(rows) => self.appearance_row(rows[s]),
                BatchAppearance::Fixed(v) => v,
            };
            c_in[GEO_FEATURES + sh..].copy_from_slice(app);
        }
        let last = self.layers.len() - 1;
        for i in DENSITY_LAYERS..last {
            let (head, tail) = cache.inputs.split_at_mut(i + 1);
            self.gemm_forward(self.layers[i], &head[i], n, &mut tail[0]);
            tail[0].iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mut logits = std::mem::take(&mut cache.upstream);
        logits.resize(n * 3, 0.0);
        self.gemm_forward(self.layers[last], &cache.inputs[last], n, &mut logits);
        cache.color.clear();
        cache.color.extend(logits.chunks_exact(3).map(|z| [sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2])]));
        cache.upstream = logits;
        Ok(())
    }

    /// Batched [`MlpDecoder::backward`]. `d_features` receives the row-major
    /// `n × feature_dim` feature gradient.
    pub fn backward_batch(
        &self,
        cache: &mut BatchCache,
        d_sigma: &[f64],
        d_color: &[[f64; 3]],
        grad: &mut DecoderGrad,
        d_features: &mut Vec<f64>,
    ) {
        let n = cache.n;
        assert!(d_sigma.len() == n && d_color.len() == n);
        let last = self.layers.len() - 1;
        let mut upstream = std::mem::take(&mut cache.upstream);
        let mut d_in = std::mem::take(&mut cache.d_in);
        upstream.clear();
        for (dc, c) in d_color.iter().zip(&cache.color) {
            upstream.extend((0..3).map(|k| dc[k] * c[k] * (1.0 - c[k])));
        }
        for i in (DENSITY_LAYERS..=last).rev() {
            let l = self.layers[i];
            let input = &cache.inputs[i];
            self.gemm_backward(l, input, &upstream, n, &mut grad.params, &mut d_in);
            if i > DENSITY_LAYERS {
                // The input of layer i is the ReLU output of layer i-1.
                for (d, x) in d_in.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            std::mem::swap(&mut upstream, &mut d_in);
        }
        // `upstream` now holds d(color input), n × color_in.
        let sh = self.config.sh_dim();
        let c_dim = self.layers[2].in_dim;
        if !cache.rows.is_empty() {
            for (s, g) in upstream.chunks_exact(c_dim).enumerate() {
                if d_sigma[s] != 0.0 || d_color[s].iter().any(|v| *v != 0.0) {
                    grad.add_appearance(cache.rows[s], &g[GEO_FEATURES + sh..]);
                }
            }
        }
        let l1 = self.layers[1];
        d_in.clear();
        for (s, g) in upstream.chunks_exact(c_dim).enumerate() {
            let (_, dsig_dz) = self.density_act(cache.density_out[s * l1.out_dim]);
            d_in.push(d_sigma[s] * dsig_dz);
            d_in.extend_from_slice(&g[..GEO_FEATURES]);
        }
        std::mem::swap(&mut upstream, &mut d_in);
        let h1 = &cache.inputs[1];
        self.gemm_backward(l1, h1, &upstream, n, &mut grad.params, &mut d_in);
        for (d, x) in d_in.iter_mut().zip(h1) {
            if *x <= 0.0 {
                *d = 0.0;
            }
        }
        self.gemm_backward(self.layers[0], &cache.inputs[0], &d_in, n, &mut grad.params, d_features);
        cache.upstream = upstream;
        cache.d_in = d_in;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent accumulators over exact chunks so the loop vectorizes.
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0; 8];
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}
