//! Photometric training of a hash grid and decoder, and the checkpoint format.
//!
//! Parameters live in f64 while training. A finished model is rounded to f32,
//! the precision of the checkpoint file, so a loaded checkpoint is exactly the
//! model that was evaluated.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! "SCLR"  u32 version
//! u64 n, n bytes      TrainConfig as JSON
//! f64 × 4             normalization center xyz, scale
//! f64                 final training loss
//! u64 n, f32 × n      hash tables (level, entry, feature)
//! u32 layers, (u32 in, u32 out) × layers
//! u64 n, f32 × n      decoder weights and biases
//! u64 n, f32 × n      appearance table (rows × dim)
//! u64 n, u32 × n      appearance rows seen in training
//! u32 res, f64 thr, u64 n, f32 × n   occupancy values
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::dataset::SceneDataset;
use crate::decoder::{BatchAppearance, BatchCache, DecoderConfig, DecoderGrad, MlpDecoder};
use crate::encoding::{EncodeCache, HashGrid, HashGridConfig};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::image::ImageBuffer;
use crate::render::{
    composite_backward, composite_unchecked, contract, mix, model_ray, render_image, sample_ray_into,
    to_unit_cube, NeuralField, OccupancyGrid, RaySampleBatch, RenderConfig, SamplePoint, SceneNormalization,
    DEFAULT_OCCUPANCY_DECAY, DEFAULT_OCCUPANCY_RESOLUTION, DEFAULT_OCCUPANCY_THRESHOLD,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCLR";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Rays of a batch are split into this many chunks regardless of thread
/// count, and chunk gradients are summed in chunk order.
pub const GRAD_CHUNKS: usize = 8;

const STREAM_GRID: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_RAYS: u64 = 3;
const STREAM_OCCUPANCY: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderPolicy {
    /// Decoder and appearance table train at the base schedule.
    Train,
    /// Decoder and appearance table train at `decoder_ft_lr`.
    Finetune,
    /// Decoder and appearance table never change.
    Freeze,
}

impl std::str::FromStr for DecoderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "finetune" => Ok(Self::Finetune),
            "freeze" => Ok(Self::Freeze),
            other => Err(Error::Config(format!("unknown decoder policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyConfig {
    pub resolution: usize,
    pub threshold: f64,
    pub decay: f64,
    /// Iterations between grid updates.
    pub interval: usize,
    /// Reference step length. Cells store `σ · step`, an opacity-scale
    /// quantity, so the threshold does not depend on the scene's units.
    pub step: f64,
}

/// Step over which the contracted cube's diagonal spans 1024 samples.
pub const DEFAULT_OCCUPANCY_STEP: f64 = 4.0 * 1.732_050_807_568_877_2 / 1024.0;

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_OCCUPANCY_RESOLUTION,
            threshold: DEFAULT_OCCUPANCY_THRESHOLD,
            decay: DEFAULT_OCCUPANCY_DECAY,
            interval: 16,
            step: DEFAULT_OCCUPANCY_STEP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub base_lr: f64,
    pub decoder_ft_lr: f64,
    pub warmup_iters: usize,
    pub decay_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub decoder_policy: DecoderPolicy,
    pub seed: u64,
    pub hash: HashGridConfig,
    pub decoder: DecoderConfig,
    pub render: RenderConfig,
    pub occupancy: OccupancyConfig,
    /// Initial bias of the density logit for freshly created decoders.
    pub density_bias_init: f64,
    /// Print `iter loss lr` every this many iterations; 0 disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_rays: 1024,
            base_lr: 1e-3,
            decoder_ft_lr: 5e-5,
            warmup_iters: 50,
            decay_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-15,
            decoder_policy: DecoderPolicy::Train,
            seed: 0,
            hash: HashGridConfig::default(),
            decoder: DecoderConfig::default(),
            render: RenderConfig::default(),
            occupancy: OccupancyConfig::default(),
            density_bias_init: 0.0,
            log_every: 100,
        }
    }
}

/// Warm-up length that keeps the 5000 / 200000 ratio.
pub fn scaled_warmup(iterations: usize) -> usize {
    ((iterations as f64 * 0.025).round() as usize).clamp(1, iterations.saturating_sub(1).max(1))
}

impl TrainConfig {
    /// Small configuration sized for a single CPU core and 64×64 images.
    pub fn desk(iterations: usize, table_size_log2: u32, seed: u64) -> Self {
        Self {
            iterations,
            warmup_iters: scaled_warmup(iterations),
            batch_rays: 128,
            base_lr: 1e-2,
            seed,
            hash: HashGridConfig {
                levels: 8,
                features_per_level: 2,
                table_size_log2,
                base_resolution: 16,
                max_resolution: 512,
            },
            decoder: DecoderConfig { width: 32, ..DecoderConfig::default() },
            render: RenderConfig { max_samples: 64, ..RenderConfig::default() },
            occupancy: OccupancyConfig { resolution: 32, ..OccupancyConfig::default() },
            log_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        self.decoder.validate()?;
        if self.iterations > 0 && !(self.warmup_iters > 0 && self.warmup_iters < self.iterations) {
            return Err(Error::Config(format!(
                "warmup_iters must be in (0, iterations), got {} of {}",
                self.warmup_iters, self.iterations
            )));
        }
        if !(self.base_lr > 0.0 && self.decoder_ft_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.decay_rate > 0.0) {
            return Err(Error::Config("decay_rate must be positive".into()));
        }
        if self.batch_rays == 0 {
            return Err(Error::Config("batch_rays must be positive".into()));
        }
        if self.occupancy.interval == 0 || !(self.occupancy.step > 0.0) || !(self.occupancy.decay > 0.0 && self.occupancy.decay < 1.0) {
            return Err(Error::Config("occupancy interval and step must be positive and decay in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr`, then exponential decay reaching
/// `base_lr · decay_rate` at the last iteration.
pub fn lr_schedule(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        cfg.base_lr * (iter + 1) as f64 / cfg.warmup_iters as f64
    } else {
        let span = (cfg.iterations - cfg.warmup_iters).max(1) as f64;
        cfg.base_lr * cfg.decay_rate.powf((iter - cfg.warmup_iters) as f64 / span)
    }
}

fn decoder_lr(iter: usize, cfg: &TrainConfig) -> Option<f64> {
    match cfg.decoder_policy {
        DecoderPolicy::Train => Some(lr_schedule(iter, cfg)),
        DecoderPolicy::Finetune => Some(lr_schedule(iter, cfg) * cfg.decoder_ft_lr / cfg.base_lr),
        DecoderPolicy::Freeze => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps }
    }

    /// One bias-corrected Adam update at step `t ≥ 1`.
    #[inline]
    pub fn update(&self, t: u64, lr: f64, param: &mut f64, grad: f64, m: &mut f64, v: &mut f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
        *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
        let m_hat = *m / (1.0 - self.beta1.powi(t as i32));
        let v_hat = *v / (1.0 - self.beta2.powi(t as i32));
        *param -= lr * m_hat / (v_hat.sqrt() + self.eps);
    }

    pub fn step(&self, t: u64, lr: f64, params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64]) {
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            self.update(t, lr, p, *g, m, v);
        }
    }
}

/// A trained model plus everything needed to render it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub normalization: SceneNormalization,
    pub final_loss: f64,
    pub grid: HashGrid,
    pub decoder: MlpDecoder,
    /// Appearance rows of the training images; novel views use their mean.
    pub trained_rows: Vec<usize>,
    pub occupancy: OccupancyGrid,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl Checkpoint {
    /// Builds a checkpoint, rounding every stored value to f32.
    pub fn new(
        config: TrainConfig,
        normalization: SceneNormalization,
        final_loss: f64,
        mut grid: HashGrid,
        mut decoder: MlpDecoder,
        trained_rows: Vec<usize>,
        occupancy: &OccupancyGrid,
    ) -> Result<Self> {
        if trained_rows.iter().any(|r| *r >= decoder.appearance_rows()) {
            return Err(Error::Dimension("trained appearance row out of range".into()));
        }
        round_f32(grid.params_mut());
        round_f32(decoder.params_mut());
        round_f32(decoder.appearance_table_mut());
        let values: Vec<f64> = occupancy.values().iter().map(|v| *v as f32 as f64).collect();
        let occupancy = OccupancyGrid::from_values(occupancy.resolution(), occupancy.threshold(), values)?;
        Ok(Self { config, normalization, final_loss, grid, decoder, trained_rows, occupancy })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let n = &self.normalization;
        for v in [n.center.x, n.center.y, n.center.z, n.scale, self.final_loss] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        write_f32s(&mut out, self.grid.params());
        let dims = self.decoder.layer_dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for (i, o) in dims {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&(o as u32).to_le_bytes());
        }
        write_f32s(&mut out, self.decoder.params());
        write_f32s(&mut out, self.decoder.appearance_table());
        out.extend_from_slice(&(self.trained_rows.len() as u64).to_le_bytes());
        for r in &self.trained_rows {
            out.extend_from_slice(&(*r as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.occupancy.resolution() as u32).to_le_bytes());
        out.extend_from_slice(&self.occupancy.threshold().to_le_bytes());
        write_f32s(&mut out, self.occupancy.values());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?)?;
        config.validate()?;
        let center = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let normalization = SceneNormalization { center, scale: r.f64()? };
        let final_loss = r.f64()?;
        let grid = HashGrid::from_params(config.hash, r.f32s()?)?;
        let n_layers = r.u32()? as usize;
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            dims.push((r.u32()? as usize, r.u32()? as usize));
        }
        if dims != config.decoder.layer_dims(grid.output_dim()) {
            return Err(Error::Checkpoint("decoder layer dims do not match the stored config".into()));
        }
        let params = r.f32s()?;
        let appearance = r.f32s()?;
        let decoder = MlpDecoder::from_parts(config.decoder, grid.output_dim(), params, appearance)?;
        let n_rows = r.u64()? as usize;
        let mut trained_rows = Vec::with_capacity(n_rows.min(bytes.len() / 4));
        for _ in 0..n_rows {
            let row = r.u32()? as usize;
            if row >= decoder.appearance_rows() {
                return Err(Error::Checkpoint(format!("trained appearance row {row} out of range")));
            }
            trained_rows.push(row);
        }
        let res = r.u32()? as usize;
        let threshold = r.f64()?;
        let occupancy = OccupancyGrid::from_values(res, threshold, r.f32s()?)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, normalization, final_loss, grid, decoder, trained_rows, occupancy })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Mean embedding over the trained rows, or over the whole table when
    /// none are recorded.
    pub fn render_appearance(&self) -> Result<Vec<f64>> {
        if self.trained_rows.is_empty() {
            return self.decoder.mean_appearance();
        }
        let mut mean = vec![0.0; self.decoder.config().appearance_dim];
        for r in &self.trained_rows {
            mean.iter_mut().zip(self.decoder.appearance_row(*r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= self.trained_rows.len() as f64);
        Ok(mean)
    }

    /// Renders a view with the mean appearance embedding.
    pub fn render(&self, pose: &CameraPose) -> Result<ImageBuffer> {
        let appearance = self.render_appearance()?;
        let field = NeuralField { grid: &self.grid, decoder: &self.decoder, appearance: &appearance };
        render_image(&field, &self.normalization, pose, &self.occupancy, &self.config.render, self.config.seed)
    }
}

fn write_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

/// Parameters that an optimizer may change under `policy`.
pub fn trainable_parameter_count(grid: &HashGrid, decoder: &MlpDecoder, policy: DecoderPolicy) -> usize {
    let dec = match policy {
        DecoderPolicy::Freeze => 0,
        _ => decoder.params().len() + decoder.appearance_table().len(),
    };
    grid.params().len() + dec
}

/// One training ray: where it comes from and what color it should produce.
#[derive(Debug, Clone, Copy)]
pub struct TrainRay {
    pub image: usize,
    pub px: u32,
    pub py: u32,
}

/// Per-sample scratch reused across rays.
#[derive(Default)]
struct Scratch {
    enc: Vec<EncodeCache>,
    dec: BatchCache,
    features: Vec<f64>,
    dirs: Vec<Vec3>,
    rows: Vec<usize>,
    /// `(t, delta)` of every gathered sample.
    t: Vec<(f64, f64)>,
    samples: Vec<SamplePoint>,
    batch: RaySampleBatch,
}

struct ChunkOut {
    loss: f64,
    samples: usize,
    decoder: DecoderGrad,
}

/// Model, optimizer state and data of one training run.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub grid: HashGrid,
    pub decoder: MlpDecoder,
    pub occupancy: OccupancyGrid,
    pub normalization: SceneNormalization,
    dataset: &'a SceneDataset,
    images: Vec<usize>,
    adam: Adam,
    grid_m: Vec<f64>,
    grid_v: Vec<f64>,
    dec_m: Vec<f64>,
    dec_v: Vec<f64>,
    app_m: Vec<f64>,
    app_v: Vec<f64>,
    chunk_grads: Vec<Vec<f64>>,
    iteration: usize,
    last_loss: f64,
    last_samples: usize,
}

impl<'a> Trainer<'a> {
    /// Sets up training on `images` (training-split indices of `dataset`).
    /// A fresh decoder is created when `decoder` is `None`.
    pub fn new(
        dataset: &'a SceneDataset,
        images: Vec<usize>,
        normalization: SceneNormalization,
        decoder: Option<MlpDecoder>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Empty("no training images".into()));
        }
        for &i in &images {
            if i >= dataset.len() || dataset.appearance_index[i].is_none() {
                return Err(Error::Config(format!("image {i} is not a training image")));
            }
        }
        let grid = HashGrid::new(cfg.hash, &mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_GRID)))?;
        let decoder = match decoder {
            Some(d) => {
                if d.feature_dim() != grid.output_dim() || *d.config() != cfg.decoder {
                    return Err(Error::Config("shared decoder does not match the model configuration".into()));
                }
                if d.appearance_rows() < dataset.num_train() {
                    return Err(Error::Config("shared decoder has too few appearance rows".into()));
                }
                d.clone_decoder()
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STREAM_DECODER));
                let mut d = MlpDecoder::new(cfg.decoder, grid.output_dim(), dataset.num_train(), &mut rng)?;
                d.set_density_bias(cfg.density_bias_init);
                d
            }
        };
        // Everything starts occupied, just above the threshold, so cells the
        // model leaves empty clear after a few updates.
        let occ = cfg.occupancy;
        let occupancy = OccupancyGrid::uniform(occ.resolution, occ.threshold, 2.0 * occ.threshold);
        let n_grid = grid.params().len();
        let n_dec = decoder.params().len();
        let n_app = decoder.appearance_table().len();
        Ok(Self {
            adam: Adam::from_config(&cfg),
            cfg,
            grid,
            decoder,
            occupancy,
            normalization,
            dataset,
            images,
            grid_m: vec![0.0; n_grid],
            grid_v: vec![0.0; n_grid],
            dec_m: vec![0.0; n_dec],
            dec_v: vec![0.0; n_dec],
            app_m: vec![0.0; n_app],
            app_v: vec![0.0; n_app],
            chunk_grads: Vec::new(),
            iteration: 0,
            last_loss: f64::NAN,
            last_samples: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Network evaluations made by the last step.
    pub fn last_samples(&self) -> usize {
        self.last_samples
    }

    fn update_occupancy(&mut self, iter: usize) -> Result<()> {
        let grid = &self.grid;
        let decoder = &self.decoder;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.cfg.seed, STREAM_OCCUPANCY), iter as u64));
        let step = self.cfg.occupancy.step;
        let density = |p: Vec3| decoder.density(&grid.encode(to_unit_cube(p))) * step;
        self.occupancy.update(density, self.cfg.occupancy.decay, &mut rng)
    }

    /// The rays of iteration `iter`, drawn uniformly over (image, pixel).
    pub fn batch_rays(&self, iter: usize) -> Vec<TrainRay> {
        use rand::Rng;
        (0..self.cfg.batch_rays)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.cfg.seed, STREAM_RAYS), mix(iter as u64, r as u64)));
                let image = self.images[rng.gen_range(0..self.images.len())];
                let pose = &self.dataset.poses[image];
                TrainRay { image, px: rng.gen_range(0..pose.width()), py: rng.gen_range(0..pose.height()) }
            })
            .collect()
    }

    /// Runs one optimization step and returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let iter = self.iteration;
        if iter > 0 && iter % self.cfg.occupancy.interval == 0 {
            self.update_occupancy(iter)?;
        }
        let rays = self.batch_rays(iter);
        let n_grid = self.grid.params().len();
        if self.chunk_grads.len() != GRAD_CHUNKS {
            self.chunk_grads = vec![vec![0.0; n_grid]; GRAD_CHUNKS];
        }
        let per_chunk = rays.len().div_ceil(GRAD_CHUNKS);
        let scale = 1.0 / (3 * rays.len()) as f64;
        let mut chunk_grads = std::mem::take(&mut self.chunk_grads);
        let outs: Vec<Result<ChunkOut>> = chunk_grads
            .par_iter_mut()
            .enumerate()
            .map(|(c, dense)| {
                let lo = (c * per_chunk).min(rays.len());
                let hi = ((c + 1) * per_chunk).min(rays.len());
                self.chunk_forward_backward(iter, &rays[lo..hi], lo, scale, dense)
            })
            .collect();
        self.chunk_grads = Vec::new();
        let mut loss = 0.0;
        let mut samples = 0;
        let mut dgrad = DecoderGrad::zeros_like(&self.decoder);
        for out in outs {
            let out = out?;
            loss += out.loss;
            samples += out.samples;
            dgrad.merge(&out.decoder);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: iter, loss });
        }

        let t = iter as u64 + 1;
        let lr = lr_schedule(iter, &self.cfg);
        let adam = self.adam;
        let block = 4096;
        self.grid
            .params_mut()
            .par_chunks_mut(block)
            .zip(self.grid_m.par_chunks_mut(block))
            .zip(self.grid_v.par_chunks_mut(block))
            .enumerate()
            .for_each(|(b, ((p, m), v))| {
                let base = b * block;
                for i in 0..p.len() {
                    let mut g = 0.0;
                    for chunk in &chunk_grads {
                        g += chunk[base + i];
                    }
                    adam.update(t, lr, &mut p[i], g, &mut m[i], &mut v[i]);
                }
            });
        chunk_grads.par_iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v = 0.0));
        self.chunk_grads = chunk_grads;

        if let Some(dlr) = decoder_lr(iter, &self.cfg) {
            adam.step(t, dlr, self.decoder.params_mut(), &dgrad.params, &mut self.dec_m, &mut self.dec_v);
            let dim = self.cfg.decoder.appearance_dim;
            let mut rows = dgrad.appearance;
            rows.sort_by_key(|(r, _)| *r);
            let table = self.decoder.appearance_table_mut();
            for (row, g) in rows {
                let s = row * dim..(row + 1) * dim;
                adam.step(t, dlr, &mut table[s.clone()], &g, &mut self.app_m[s.clone()], &mut self.app_v[s]);
            }
        }

        if self.cfg.log_every > 0 && iter % self.cfg.log_every == 0 {
            println!("{iter} {loss:.6e} {lr:.6e}");
        }
        self.iteration += 1;
        self.last_loss = loss;
        self.last_samples = samples;
        Ok(loss)
    }

    fn chunk_forward_backward(
        &self,
        iter: usize,
        rays: &[TrainRay],
        first: usize,
        scale: f64,
        dense: &mut [f64],
    ) -> Result<ChunkOut> {
        let cfg = &self.cfg;
        let fd = self.grid.output_dim();
        let mut s = Scratch::default();
        // Gather every candidate sample of the chunk so the decoder runs as
        // one matrix product per layer.
        let mut spans = Vec::with_capacity(rays.len());
        for (k, tr) in rays.iter().enumerate() {
            let pose = &self.dataset.poses[tr.image];
            let row = self.dataset.appearance_index[tr.image].expect("training image");
            let mut rng = ChaCha8Rng::seed_from_u64(mix(
                mix(cfg.seed, STREAM_RAYS ^ 0xff),
                mix(iter as u64, (first + k) as u64),
            ));
            // Pixel centers, matching how the reference images were rendered.
            let ray = model_ray(
                &self.normalization,
                pose,
                tr.px as f64 + 0.5,
                tr.py as f64 + 0.5,
                &cfg.render.bounds,
            );
            let start = s.t.len();
            if let Some(ray) = ray {
                sample_ray_into(&ray, &self.occupancy, cfg.render.max_samples, cfg.render.spacing, Some(&mut rng), &mut s.samples);
                for sp in &s.samples {
                    let i = s.t.len();
                    if s.enc.len() <= i {
                        s.enc.push(EncodeCache::default());
                    }
                    s.features.resize((i + 1) * fd, 0.0);
                    let x = to_unit_cube(contract(ray.at(sp.t)));
                    self.grid.encode_into(x, &mut s.features[i * fd..], &mut s.enc[i]);
                    s.t.push((sp.t, sp.delta));
                    s.dirs.push(ray.direction);
                    s.rows.push(row);
                }
            }
            spans.push(start..s.t.len());
        }
        let n = s.t.len();
        self.decoder.forward_batch(&s.features, &s.dirs, BatchAppearance::Rows(&s.rows), &mut s.dec)?;

        let mut d_sigma = vec![0.0; n];
        let mut d_c = vec![[0.0; 3]; n];
        let mut loss = 0.0;
        let mut evaluated = 0;
        for (tr, span) in rays.iter().zip(spans) {
            let target = self.dataset.images[tr.image].get(tr.px, tr.py);
            s.batch = RaySampleBatch::default();
            let mut trans = 1.0;
            for i in span.clone() {
                let (t, delta) = s.t[i];
                let sigma = s.dec.sigma[i];
                s.batch.push(t, delta, sigma, s.dec.color[i]);
                trans *= (-sigma * delta).exp();
                if trans < cfg.render.early_stop {
                    break;
                }
            }
            let comp = composite_unchecked(&s.batch, cfg.render.background);
            let mut d_color = [0.0; 3];
            for c in 0..3 {
                let e = comp.color[c] - target[c];
                loss += e * e;
                d_color[c] = 2.0 * e * scale;
            }
            evaluated += s.batch.len();
            if s.batch.is_empty() {
                continue;
            }
            // Samples past the early stop keep a zero upstream.
            let (ds, dc) = composite_backward(&s.batch, cfg.render.background, d_color);
            d_sigma[span.start..span.start + ds.len()].copy_from_slice(&ds);
            d_c[span.start..span.start + dc.len()].copy_from_slice(&dc);
        }
        let mut decoder_grad = DecoderGrad::zeros_like(&self.decoder);
        let mut d_features = Vec::new();
        self.decoder.backward_batch(&mut s.dec, &d_sigma, &d_c, &mut decoder_grad, &mut d_features);
        for (i, enc) in s.enc[..n].iter().enumerate() {
            if d_sigma[i] != 0.0 || d_c[i] != [0.0; 3] {
                self.grid.backward_dense(enc, &d_features[i * fd..(i + 1) * fd], dense);
            }
        }
        Ok(ChunkOut { loss, samples: evaluated, decoder: decoder_grad })
    }

    pub fn run(&mut self) -> Result<f64> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
        }
        Ok(self.last_loss)
    }

    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        let mut rows: Vec<usize> = self.images.iter().filter_map(|&i| self.dataset.appearance_index[i]).collect();
        rows.sort_unstable();
        rows.dedup();
        Checkpoint::new(self.cfg, self.normalization, self.last_loss, self.grid, self.decoder, rows, &self.occupancy)
    }
}

/// Axis-aligned box around every camera center of the dataset.
pub fn camera_aabb(dataset: &SceneDataset) -> Result<Aabb> {
    Aabb::from_points(dataset.camera_centers()).ok_or_else(|| Error::Empty("dataset has no cameras".into()))
}

/// Trains the global model on every training image.
pub fn train_coarse(dataset: &SceneDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let normalization = SceneNormalization::fit(&camera_aabb(dataset)?);
    let mut trainer = Trainer::new(dataset, dataset.train_indices(), normalization, None, *cfg)?;
    trainer.run()?;
    trainer.into_checkpoint()
}

/// Trains one block's model on the training images among `members`, with the
/// scene normalized to the block's box. The decoder starts as a copy of
/// `shared_decoder`, or fresh when none is given.
pub fn train_block(
    dataset: &SceneDataset,
    members: &[usize],
    block_aabb: &Aabb,
    shared_decoder: Option<&MlpDecoder>,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let images: Vec<usize> = members.iter().copied().filter(|&i| dataset.appearance_index.get(i).is_some_and(|a| a.is_some())).collect();
    if images.is_empty() {
        return Err(Error::Empty("block has no training images".into()));
    }
    let normalization = SceneNormalization::fit(block_aabb);
    let mut trainer = Trainer::new(dataset, images, normalization, shared_decoder.map(|d| d.clone_decoder()), *cfg)?;
    trainer.run()?;
    trainer.into_checkpoint()
}
