//! Run configuration.
//!
//! A config file is flat `key = value` text (TOML syntax, no tables). Every
//! section struct below is flattened into one namespace, so keys must be
//! unique across sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KarlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    Continuous,
    Discrete,
}

/// Geometry of the 2-D base tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub base_dim: usize,
    pub base_hidden: usize,
    pub base_mode: TokenMode,
    pub base_codebook_size: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            base_dim: 16,
            base_hidden: 96,
            base_mode: TokenMode::Continuous,
            base_codebook_size: 512,
        }
    }
}

impl BaseConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of 2-D tokens `G`.
    pub fn grid_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(KarlError::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.base_dim == 0 || self.base_hidden == 0 {
            return Err(KarlError::Config(
                "channels, base_dim and base_hidden must be positive".into(),
            ));
        }
        if self.base_mode == TokenMode::Discrete && self.base_codebook_size == 0 {
            return Err(KarlError::Config(
                "discrete base mode needs base_codebook_size > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

pub const DEFAULT_LOSS_TABLE: [f64; 12] = [0.0, 0.01, 0.02, 0.03, 0.05, 0.07, 0.09, 0.11, 0.14, 0.2, 0.3, 0.4];

/// Architecture of the 1-D tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub enc_width: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub t_max: usize,
    pub budget_grid: Vec<usize>,
    pub latent_mode: TokenMode,
    pub codebook_size: usize,
    /// Width of the factorized code space. Continuous tokens pass through a
    /// linear bottleneck of this width; `0` disables it.
    pub code_dim: usize,
    pub threshold: f64,
    pub loss_table: Vec<f64>,
    /// Stop the halting loss from shaping the encoder states.
    pub detach_halting: bool,
    /// Hidden width of the halting head, which then also gets its own ε
    /// embedding. `0` is a single linear layer on the slot states.
    pub halt_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_width: 32,
            enc_depth: 2,
            dec_width: 32,
            dec_depth: 2,
            heads: 2,
            mlp_ratio: 2,
            t_max: 16,
            budget_grid: (1..=8).map(|k| 2 * k).collect(),
            latent_mode: TokenMode::Discrete,
            codebook_size: 256,
            code_dim: 12,
            threshold: 0.75,
            loss_table: DEFAULT_LOSS_TABLE.to_vec(),
            detach_halting: true,
            halt_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(KarlError::Config(m));
        if self.budget_grid.is_empty() {
            return err("budget_grid is empty".into());
        }
        if !self.budget_grid.windows(2).all(|w| w[0] < w[1]) {
            return err("budget_grid must be strictly ascending".into());
        }
        if self.budget_grid[0] == 0 || *self.budget_grid.last().unwrap() > self.t_max {
            return err(format!("budget_grid must lie in [1, t_max={}]", self.t_max));
        }
        if !self.budget_grid.contains(&self.t_max) {
            return err("budget_grid must contain t_max".into());
        }
        if self.heads == 0 || !self.enc_width.is_multiple_of(self.heads) || !self.dec_width.is_multiple_of(self.heads) {
            return err("encoder and decoder widths must be divisible by heads".into());
        }
        if !self.enc_width.is_multiple_of(4) || !self.dec_width.is_multiple_of(4) {
            return err("encoder and decoder widths must be multiples of 4".into());
        }
        if self.enc_depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return err("depths and mlp_ratio must be positive".into());
        }
        if self.latent_mode == TokenMode::Discrete && (self.codebook_size == 0 || self.code_dim == 0) {
            return err("discrete latent mode needs codebook_size and code_dim > 0".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return err(format!("threshold {} outside (0, 1)", self.threshold));
        }
        crate::training::LossTable::new(self.loss_table.clone())?;
        Ok(())
    }

    pub fn min_budget(&self) -> usize {
        self.budget_grid[0]
    }

    /// Spacing used for "within one grid step" comparisons.
    pub fn grid_step(&self) -> usize {
        self.budget_grid
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(self.t_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub base_epochs: usize,
    pub base_batch: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub beta: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Iterations between dead-code restarts of the 1-D codebook; `0` disables.
    pub codebook_restart_every: usize,
    /// Label as kept, in phase 2, only the smallest budget whose most recent
    /// phase-1 error on the same image already meets the condition.
    pub minimal_keep: bool,
    /// Weight of an extra halting loss at a uniformly drawn table condition,
    /// labelled from the same recorded errors. Needs `minimal_keep`; `0`
    /// disables.
    pub dense_halting: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base_epochs: 30,
            base_batch: 16,
            base_lr: 3e-3,
            batch_size: 8,
            lr: 2e-3,
            warmup_iters: 100,
            stage1_iters: 1500,
            stage2_iters: 500,
            beta: 0.25,
            lambda: 1.0,
            weight_decay: 0.0,
            clip_norm: 1.0,
            codebook_restart_every: 100,
            minimal_keep: false,
            dense_halting: 0.0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(KarlError::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if self.batch_size == 0 || self.base_batch == 0 {
            return Err(KarlError::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.base_lr > 0.0) {
            return Err(KarlError::Config("learning rates must be positive".into()));
        }
        if self.beta < 0.0 || self.lambda < 0.0 {
            return Err(KarlError::Config("beta and lambda must be non-negative".into()));
        }
        if self.dense_halting.is_nan() || self.dense_halting < 0.0 || (self.dense_halting > 0.0 && !self.minimal_keep) {
            return Err(KarlError::Config(
                "dense_halting must be non-negative and needs minimal_keep".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub dataset_path: Option<PathBuf>,
    pub data_seed: u64,
    /// Synthetic: images per family in the training split.
    pub train_per_family: usize,
    /// Synthetic: images per family in the validation split.
    pub val_per_family: usize,
    /// Folder: fraction of files assigned to validation.
    pub val_fraction: f64,
    pub families: Vec<String>,
    pub checker_cells: Vec<usize>,
    pub noise_amplitude: (f64, f64),
    pub mandelbrot_center: (f64, f64),
    pub mandelbrot_span: f64,
    pub mandelbrot_jitter: f64,
    pub mandelbrot_max_iter: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dataset_path: None,
            data_seed: 7,
            train_per_family: 512,
            val_per_family: 50,
            val_fraction: 0.1,
            families: ["constant", "gradient", "checkerboard", "noise", "mandelbrot"]
                .map(String::from)
                .to_vec(),
            checker_cells: vec![2, 4, 8],
            noise_amplitude: (1.0, 1.0),
            mandelbrot_center: (-0.745, 0.11),
            mandelbrot_span: 0.25,
            mandelbrot_jitter: 0.0,
            mandelbrot_max_iter: 64,
        }
    }
}

/// Everything one command needs. Serialized flat.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub base: BaseConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub data: DataConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.data_seed > i64::MAX as u64 {
            return Err(KarlError::Config(
                "data_seed must fit in a signed 64-bit integer".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| KarlError::Config(e.to_string()))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(KarlError::Config(format!("key {k}: nested tables are not allowed")));
        }
        let cfg: Self = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| KarlError::Config(e.to_string()))?;
        let known = cfg.to_table()?;
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(KarlError::Config(format!("unknown key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KarlError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn to_table(&self) -> Result<toml::Table> {
        let text = toml::to_string(self).map_err(|e| KarlError::Config(e.to_string()))?;
        toml::from_str(&text).map_err(|e| KarlError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KarlError::Config(e.to_string()))
    }

    /// Digest of the full configuration, embedded in run outputs.
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Digest of the architecture only; stored in KARL checkpoints.
    pub fn model_digest(&self) -> String {
        digest_of(&(&self.base, &self.model))
    }
}

/// Short hex SHA-256 of the canonical JSON form of `value`.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let hash = Sha256::digest(&json);
    hex::encode(&hash[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_flat_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert!(!text.contains('['.to_string().repeat(2).as_str()));
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("t_max = 8\nbudget_grid = [4, 8]\nseed = 3\n").unwrap();
        assert_eq!(cfg.model.t_max, 8);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.base, BaseConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("t_maxx = 8\n").unwrap_err();
        assert!(err.to_string().contains("t_maxx"), "{err}");
    }

    #[test]
    fn invalid_grid_is_rejected() {
        assert!(ExperimentConfig::from_toml_str("budget_grid = [4, 2, 16]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("budget_grid = [4, 8]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("image_size = 30\n").is_err());
    }

    #[test]
    fn digest_tracks_architecture_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.seed = 99;
        assert_eq!(a.model_digest(), b.model_digest());
        assert_ne!(a.digest(), b.digest());
        b.model.enc_depth = 3;
        assert_ne!(a.model_digest(), b.model_digest());
    }
}
