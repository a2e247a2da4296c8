//! End-to-end flows shared by the command-line tool, benches and tests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::base::{BaseFitLog, BaseTokenizer};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{load_split, Split};
use crate::error::{KarlError, Result};
use crate::image::Image;
use crate::model::KarlModel;
use crate::training::{train, TrainReport};

pub const BASE_CHECKPOINT: &str = "base.json";
pub const MODEL_CHECKPOINT: &str = "model.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const TRAINING_SUMMARY: &str = "training.json";

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Vec<Image>, Vec<Image>)> {
    let (res, ch) = (cfg.base.image_size, cfg.base.channels);
    let train = load_split(&cfg.data, res, ch, Split::Train)?;
    let val = load_split(&cfg.data, res, ch, Split::Val)?;
    Ok((train, val))
}

pub fn fit_base(cfg: &ExperimentConfig, train: &[Image]) -> Result<(BaseTokenizer, BaseFitLog)> {
    let mut base = BaseTokenizer::new(cfg.base.clone(), cfg.train.seed)?;
    let t = &cfg.train;
    let log = base.fit(train, t.base_epochs, t.base_batch, t.base_lr, t.seed.wrapping_add(1))?;
    log::info!(
        "base tokenizer: l1 {:.4} -> {:.4}",
        log.initial_l1,
        log.epoch_l1.last().copied().unwrap_or(log.initial_l1)
    );
    Ok((base, log))
}

pub fn fit_model(
    cfg: &ExperimentConfig,
    base: &BaseTokenizer,
    train_set: &[Image],
    val_set: &[Image],
    log: &mut dyn Write,
) -> Result<(KarlModel, TrainReport)> {
    let model = KarlModel::new(cfg.model.clone(), cfg.base.clone(), cfg.train.seed.wrapping_add(2))?;
    train(model, base, train_set, val_set, &cfg.train, log, |_| {})
}

/// Files written by [`run_training`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub config_digest: String,
    pub model_digest: String,
    pub base_checkpoint: PathBuf,
    pub model_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub base_final_l1: Option<f64>,
    pub report: TrainReport,
}

/// Loads `out_dir/base.json` when it matches the config, otherwise fits a
/// new base tokenizer and saves it there. The second value is the final
/// training ℓ1 of a fresh fit.
pub fn ensure_base(
    cfg: &ExperimentConfig,
    train_set: &[Image],
    out_dir: &Path,
) -> Result<(BaseTokenizer, Option<f64>)> {
    let base_path = out_dir.join(BASE_CHECKPOINT);
    match checkpoint::load_base(&base_path, Some(&cfg.base.digest())) {
        Ok(b) => {
            log::info!("reusing {}", base_path.display());
            Ok((b, None))
        }
        Err(KarlError::Io { .. }) => {
            let (b, log) = fit_base(cfg, train_set)?;
            checkpoint::save_base(&base_path, &b)?;
            Ok((b, log.epoch_l1.last().copied()))
        }
        Err(e) => Err(e),
    }
}

/// Trains (or reuses) the base tokenizer and then the adaptive model,
/// writing checkpoints, the metrics log and a training summary under
/// `out_dir`.
pub fn run_training(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainingSummary> {
    fs::create_dir_all(out_dir).map_err(|e| KarlError::io(out_dir, e))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string()?).map_err(|e| KarlError::io(out_dir, e))?;
    let (train_set, val_set) = load_data(cfg)?;
    let (base, base_l1) = ensure_base(cfg, &train_set, out_dir)?;
    let log_path = out_dir.join(METRICS_LOG);
    let file = File::create(&log_path).map_err(|e| KarlError::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let (model, report) = fit_model(cfg, &base, &train_set, &val_set, &mut writer)?;
    writer.flush().map_err(|e| KarlError::io(&log_path, e))?;
    let model_path = out_dir.join(MODEL_CHECKPOINT);
    checkpoint::save_model(&model_path, &model)?;
    let summary = TrainingSummary {
        config_digest: cfg.digest(),
        model_digest: cfg.model_digest(),
        base_checkpoint: out_dir.join(BASE_CHECKPOINT),
        model_checkpoint: model_path,
        metrics_log: log_path,
        base_final_l1: base_l1,
        report,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(out_dir.join(TRAINING_SUMMARY), text).map_err(|e| KarlError::io(out_dir, e))?;
    Ok(summary)
}

/// Loads a model checkpoint and its base tokenizer, checking both against
/// the architecture in `cfg`.
pub fn load_pair(cfg: &ExperimentConfig, model_path: &Path, base_path: &Path) -> Result<(KarlModel, BaseTokenizer)> {
    let base = checkpoint::load_base(base_path, Some(&cfg.base.digest()))?;
    let model = checkpoint::load_model(model_path, Some(&cfg.model_digest()))?;
    checkpoint::check_pair(&model, &base)?;
    Ok((model, base))
}
