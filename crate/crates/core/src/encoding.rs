//! Multi-resolution hash-grid encoder.
//!
//! Level `l` covers the unit cube with a grid of resolution
//! `N_l = floor(N_min · b^l)`, where `b` grows geometrically from `N_min` to
//! `N_max`. Each level owns a table of `T = 2^table_size_log2` entries of `F`
//! features. Levels whose `(N_l + 1)^3` vertices fit in the table are indexed
//! densely; finer levels use the spatial XOR hash. A point's code is the
//! trilinear interpolation of its cell's eight corner entries, concatenated
//! over levels from coarse to fine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Per-axis multipliers of the spatial hash.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

const INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub base_resolution: u32,
    pub max_resolution: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            features_per_level: 4,
            table_size_log2: 19,
            base_resolution: 16,
            max_resolution: 2048,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::Config("hash grid needs at least one level and one feature".into()));
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 26 {
            return Err(Error::Config(format!("table_size_log2 {} out of range 1..=26", self.table_size_log2)));
        }
        if self.base_resolution == 0 || self.max_resolution < self.base_resolution {
            return Err(Error::Config(format!(
                "need max_resolution >= base_resolution >= 1, got {} and {}",
                self.max_resolution, self.base_resolution
            )));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64
    }

    pub fn resolution(&self, level: usize) -> u32 {
        let b = self.growth_factor().exp();
        // The small epsilon keeps exact powers (e.g. N_max itself) from flooring down.
        ((self.base_resolution as f64) * b.powi(level as i32) + 1e-9).floor() as u32
    }

    /// Whether every vertex of `level` gets its own table entry.
    pub fn is_dense(&self, level: usize) -> bool {
        let side = self.resolution(level) as u128 + 1;
        side * side * side <= self.table_size() as u128
    }

    pub fn parameter_count(&self) -> usize {
        self.levels * self.table_size() * self.features_per_level
    }
}

/// `(⊕ coord_i · π_i) mod 2^log2`, with wrapping 64-bit products.
#[inline]
pub fn hash_index(coord: [u64; 3], table_size_log2: u32) -> usize {
    let h = coord[0].wrapping_mul(HASH_PRIMES[0])
        ^ coord[1].wrapping_mul(HASH_PRIMES[1])
        ^ coord[2].wrapping_mul(HASH_PRIMES[2]);
    (h & ((1u64 << table_size_log2) - 1)) as usize
}

/// Table entries and trilinear weights of one level's eight cell corners.
pub type Corners = [(usize, f64); 8];

/// Entries touched by one `encode` call; reused by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct EncodeCache {
    /// `levels × 8` (flat parameter offset of the entry's first feature, weight).
    pub corners: Vec<(u32, f64)>,
}

/// Sparse gradient with respect to the flat parameter vector.
#[derive(Debug, Clone, Default)]
pub struct SparseGrad {
    pub entries: Vec<(u32, f64)>,
}

impl SparseGrad {
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Adds every entry into a dense buffer, in insertion order.
    pub fn scatter_into(&self, dense: &mut [f64]) {
        for &(i, g) in &self.entries {
            dense[i as usize] += g;
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut d = vec![0.0; len];
        self.scatter_into(&mut d);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    /// `levels × T × F`, level-major then entry then feature.
    params: Vec<f64>,
    /// Cached `(N_l, dense)` per level.
    level_info: Vec<(u32, bool)>,
}

impl HashGrid {
    /// Uniform init in `[-1e-4, 1e-4]`, rounded to f32 so checkpoints are exact.
    pub fn new<R: Rng + ?Sized>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = (0..config.parameter_count())
            .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE) as f32 as f64)
            .collect();
        Self::from_params(config, params)
    }

    pub fn from_params(config: HashGridConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.parameter_count() {
            return Err(Error::Dimension(format!(
                "hash grid expects {} parameters, got {}",
                config.parameter_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hash table entry".into()));
        }
        let level_info = (0..config.levels).map(|l| (config.resolution(l), config.is_dense(l))).collect();
        Ok(Self { config, params, level_info })
    }

    pub fn filled(config: HashGridConfig, value: f64) -> Result<Self> {
        Self::from_params(config, vec![value; config.parameter_count()])
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Table index of an integer vertex at `level`.
    #[inline]
    pub fn vertex_index(&self, level: usize, v: [u64; 3]) -> usize {
        let (n, dense) = self.level_info[level];
        if dense {
            let n = n as u64;
            let side = n + 1;
            (v[0] + v[1] * side + v[2] * side * side) as usize
        } else {
            hash_index(v, self.config.table_size_log2)
        }
    }

    /// Corner entries and trilinear weights of the cell containing `x` at `level`.
    /// `x` is clamped into the unit cube.
    pub fn corners(&self, level: usize, x: Vec3) -> Corners {
        let (res, dense) = self.level_info[level];
        corners_at(x, res, dense, self.config.table_size_log2)
    }

    pub fn encode(&self, x: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        let mut cache = EncodeCache::default();
        self.encode_into(x, &mut out, &mut cache);
        out
    }

    /// Writes the code of `x` into `out` and records the touched entries in `cache`.
    pub fn encode_into(&self, x: Vec3, out: &mut [f64], cache: &mut EncodeCache) {
        let f = self.config.features_per_level;
        let t = self.config.table_size();
        let log2 = self.config.table_size_log2;
        cache.corners.clear();
        let x = x.clamp(0.0, 1.0);
        for (level, &(res, dense)) in self.level_info.iter().enumerate() {
            let corners = corners_at(x, res, dense, log2);
            let feat = &mut out[level * f..(level + 1) * f];
            feat.fill(0.0);
            let level_base = level * t * f;
            for (entry, w) in corners {
                let base = level_base + entry * f;
                for (o, p) in feat.iter_mut().zip(&self.params[base..base + f]) {
                    *o += w * p;
                }
                cache.corners.push((base as u32, w));
            }
        }
    }

    /// Gradient of `⟨upstream, encode(x)⟩` with respect to the tables.
    pub fn encode_backward(&self, x: Vec3, upstream: &[f64]) -> SparseGrad {
        let mut out = vec![0.0; self.output_dim()];
        let mut cache = EncodeCache::default();
        self.encode_into(x, &mut out, &mut cache);
        let mut grad = SparseGrad::default();
        self.backward_cached(&cache, upstream, &mut grad);
        grad
    }

    /// Appends the scatter of `upstream` through the cached corners to `grad`.
    pub fn backward_cached(&self, cache: &EncodeCache, upstream: &[f64], grad: &mut SparseGrad) {
        let f = self.config.features_per_level;
        for (k, &(base, w)) in cache.corners.iter().enumerate() {
            let level = k / 8;
            let up = &upstream[level * f..(level + 1) * f];
            if w == 0.0 {
                continue;
            }
            for (j, u) in up.iter().enumerate() {
                if *u != 0.0 {
                    grad.entries.push((base + j as u32, w * u));
                }
            }
        }
    }

    /// Like [`HashGrid::backward_cached`] but adds straight into a dense buffer.
    pub fn backward_dense(&self, cache: &EncodeCache, upstream: &[f64], dense: &mut [f64]) {
        let f = self.config.features_per_level;
        for (k, &(base, w)) in cache.corners.iter().enumerate() {
            let up = &upstream[(k / 8) * f..(k / 8 + 1) * f];
            let base = base as usize;
            for (d, u) in dense[base..base + f].iter_mut().zip(up) {
                *d += w * u;
            }
        }
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.params.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
fn corners_at(x: Vec3, res: u32, dense: bool, log2: u32) -> Corners {
    let n = res as f64;
    let mut base = [0u64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let p = x[a].clamp(0.0, 1.0) * n;
        let cell = (p.floor() as i64).clamp(0, res as i64 - 1);
        base[a] = cell as u64;
        frac[a] = p - cell as f64;
    }
    let side = res as u64 + 1;
    let mut out = [(0usize, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut v = base;
        let mut w = 1.0;
        for a in 0..3 {
            if c & (1 << a) != 0 {
                v[a] += 1;
                w *= frac[a];
            } else {
                w *= 1.0 - frac[a];
            }
        }
        let idx = if dense {
            (v[0] + v[1] * side + v[2] * side * side) as usize
        } else {
            hash_index(v, log2)
        };
        *slot = (idx, w);
    }
    out
}
