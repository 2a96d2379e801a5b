//! Run configuration: built-in desk defaults, overlaid by an optional TOML
//! file, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blockfield::scenegen::{EmitConfig, Layout};
use blockfield::train::{DecoderPolicy, TrainConfig};
use blockfield::Vec3;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_HASH_LOG2: u32 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Idw,
    Global,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Idw => "idw",
            FusionMode::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory for every artifact of the run.
    pub out: PathBuf,
    /// Existing dataset to use instead of generating one under `out/data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub k: usize,
    pub s_aabb: [f64; 3],
    /// KMeans seed; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Synthetic scene written by `gen-data`.
    pub scene: EmitConfig,
    /// Shared by the coarse model and the blocks; the decoder policy applies
    /// to the blocks only.
    pub train: TrainConfig,
    pub partition: PartitionConfig,
    pub fusion: FusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths { out: PathBuf::from("run"), data: None },
            scene: EmitConfig::default(),
            train: TrainConfig {
                decoder_policy: DecoderPolicy::Finetune,
                ..TrainConfig::desk(DEFAULT_ITERATIONS, DEFAULT_HASH_LOG2, 0)
            },
            partition: PartitionConfig { k: 2, s_aabb: [1.2; 3], seed: None },
            fusion: FusionConfig { mode: FusionMode::Global, gamma: 1.0 },
        }
    }
}

/// Command-line values that replace config entries when given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub k: Option<usize>,
    pub s_aabb: Option<[f64; 3]>,
    pub fusion: Option<FusionMode>,
    pub gamma: Option<f64>,
    pub decoder_policy: Option<DecoderPolicy>,
    pub hash_log2: Option<u32>,
    pub iterations: Option<usize>,
    pub layout: Option<Layout>,
    pub n_cameras: Option<usize>,
    pub resolution: Option<u32>,
}

/// Recursively replaces entries of `base` with those of `over`.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid by the TOML text. Unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        let mut base = toml::Value::try_from(RunConfig::default()).context("serializing defaults")?;
        merge(&mut base, over);
        let cfg: RunConfig = base.try_into().context("invalid config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.paths.out = v.clone();
        }
        if let Some(v) = &o.data {
            self.paths.data = Some(v.clone());
        }
        if let Some(v) = o.k {
            self.partition.k = v;
        }
        if let Some(v) = o.s_aabb {
            self.partition.s_aabb = v;
        }
        if let Some(v) = o.fusion {
            self.fusion.mode = v;
        }
        if let Some(v) = o.gamma {
            self.fusion.gamma = v;
        }
        if let Some(v) = o.decoder_policy {
            self.train.decoder_policy = v;
        }
        if let Some(v) = o.hash_log2 {
            self.train.hash.table_size_log2 = v;
        }
        if let Some(v) = o.iterations {
            self.train.iterations = v;
            self.train.warmup_iters = blockfield::train::scaled_warmup(v);
        }
        if let Some(v) = o.layout {
            self.scene.layout = v;
        }
        if let Some(v) = o.n_cameras {
            self.scene.n_cameras = v;
        }
        if let Some(v) = o.resolution {
            self.scene.width = v;
            self.scene.height = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.partition.k == 0 {
            bail!("partition.k must be at least 1");
        }
        if self.partition.s_aabb.iter().any(|s| !(*s >= 1.0)) {
            bail!("partition.s_aabb entries must be >= 1, got {:?}", self.partition.s_aabb);
        }
        if !(self.fusion.gamma > 0.0) {
            bail!("fusion.gamma must be positive, got {}", self.fusion.gamma);
        }
        if self.scene.n_cameras < 2 {
            bail!("scene.n_cameras must be at least 2");
        }
        Ok(())
    }

    /// The training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition.seed.unwrap_or(self.seed)
    }

    pub fn s_aabb(&self) -> Vec3 {
        Vec3::from_array(self.partition.s_aabb)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| self.paths.out.join("data"))
    }
}

/// `"1.2"` or `"1.2,1.2,1.5"`.
pub fn parse_s_aabb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> =
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [v] => Ok([*v; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(format!("expected 1 or 3 comma-separated numbers, got {}", parts.len())),
    }
}
