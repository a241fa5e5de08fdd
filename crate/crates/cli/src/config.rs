//! Run configuration: one TOML file with `model`, `optim`, `pretrain`,
//! `data` and `eval` sections.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use transreid_core::eval::Metric;
use transreid_core::model::ModelConfig;
use transreid_core::sie::SieMode;
use transreid_core::synthdata::SynthSpec;
use transreid_core::train::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest CSV; when absent the `synth` spec is generated in memory.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None, synth: SynthSpec::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    pub bins: usize,
    /// Query images whose attention maps `eval` dumps.
    pub attention_maps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { metric: Metric::Euclidean, bins: 20, attention_maps: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub optim: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            optim: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative manifest paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing config {}", path.display()))
    }

    /// Cross-field checks; the data-dependent ones for a manifest run happen
    /// when the data is loaded.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        self.optim.augment.validate()?;
        if self.optim.p < 2 || self.optim.k < 2 {
            bail!("config error: PK batches need p >= 2 and k >= 2, got p={} k={}", self.optim.p, self.optim.k);
        }
        if self.optim.epochs == 0 {
            bail!("config error: epochs must be >= 1");
        }
        if !(self.optim.lr > 0.0) {
            bail!("config error: lr must be > 0, got {}", self.optim.lr);
        }
        if self.eval.bins == 0 {
            bail!("config error: eval.bins must be >= 1");
        }
        if self.pretrain.enabled && (self.pretrain.ids < self.optim.p || self.pretrain.epochs == 0) {
            bail!("config error: pretraining needs ids >= p and epochs >= 1");
        }
        if self.data.manifest.is_none() {
            let s = &self.data.synth;
            s.validate()?;
            check_data_dims(m, s.height, s.width, s.channels)?;
            check_side_info(m, s.n_cameras, s.n_views)?;
            if m.num_ids != s.train_ids {
                bail!("config error: model.num_ids = {} but data.synth.train_ids = {}", m.num_ids, s.train_ids);
            }
            if s.images_per_id < self.optim.k {
                bail!("config error: images_per_id {} below k = {}", s.images_per_id, self.optim.k);
            }
        }
        Ok(())
    }

    /// SHA-256 over the sections that fix the parameter layout and the run
    /// it came from: seed, model, optim and pretrain.
    pub fn hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            model: &'a ModelConfig,
            optim: &'a TrainConfig,
            pretrain: &'a PretrainConfig,
        }
        let text = toml::to_string(&Key { seed: self.seed, model: &self.model, optim: &self.optim, pretrain: &self.pretrain })?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

pub fn check_data_dims(m: &ModelConfig, h: usize, w: usize, c: usize) -> Result<()> {
    if (m.height, m.width, m.channels) != (h, w, c) {
        bail!("config error: model expects {}x{}x{} images, data has {h}x{w}x{c}", m.height, m.width, m.channels);
    }
    Ok(())
}

pub fn check_side_info(m: &ModelConfig, cameras: usize, views: usize) -> Result<()> {
    let sie = &m.sie;
    if sie.mode == SieMode::Off {
        return Ok(());
    }
    if sie.mode != SieMode::ViewOnly && cameras > sie.n_cameras {
        bail!("config error: data has {cameras} cameras, model.sie.n_cameras = {}", sie.n_cameras);
    }
    if sie.mode.needs_view() && views > sie.n_views {
        bail!("config error: data has {views} viewpoints, model.sie.n_views = {}", sie.n_views);
    }
    Ok(())
}
