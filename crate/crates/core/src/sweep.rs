//! Architecture sweeps: train one model per cell against a shared frozen
//! base tokenizer and compare their fixed- and variable-token curves.
//!
//! Each cell writes `out_dir/<label>/model.json` and `result.json` as it
//! finishes, so an interrupted sweep resumes where it stopped. A failing
//! cell is recorded and the remaining cells still run.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::base::BaseTokenizer;
use crate::checkpoint;
use crate::config::{ExperimentConfig, TokenMode};
use crate::error::{KarlError, Result};
use crate::image::Image;
use crate::metrics::{eval_fixed_tokens, eval_variable_tokens};
use crate::pipeline::{fit_model, MODEL_CHECKPOINT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    EncoderWidth,
    EncoderDepth,
    DecoderWidth,
    DecoderDepth,
    CodebookSize,
    ContinuousVsDiscrete,
    /// Values are `enc/dec` pairs of size presets, e.g. `small/large`.
    EncoderDecoder,
}

impl FromStr for SweepAxis {
    type Err = KarlError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "encoder_width" => Self::EncoderWidth,
            "encoder_depth" => Self::EncoderDepth,
            "decoder_width" => Self::DecoderWidth,
            "decoder_depth" => Self::DecoderDepth,
            "codebook_size" => Self::CodebookSize,
            "continuous_vs_discrete" => Self::ContinuousVsDiscrete,
            "encoder_decoder" => Self::EncoderDecoder,
            other => return Err(KarlError::Config(format!("unknown sweep axis {other:?}"))),
        })
    }
}

/// Width and depth of one side of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizePreset {
    pub width: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub small: SizePreset,
    pub large: SizePreset,
    /// Targets for the variable-token curve.
    pub eps_values: Vec<f64>,
}

impl SweepSpec {
    /// The 2×2 small/large encoder × decoder grid.
    pub fn encoder_decoder(small: SizePreset, large: SizePreset) -> Self {
        Self {
            axis: SweepAxis::EncoderDecoder,
            values: ["small/small", "small/large", "large/small", "large/large"]
                .map(String::from)
                .to_vec(),
            small,
            large,
            eps_values: vec![0.0, 0.02, 0.03, 0.05, 0.07, 0.09, 0.11, 0.14, 0.2],
        }
    }

    fn preset(&self, name: &str) -> Result<SizePreset> {
        match name {
            "small" => Ok(self.small),
            "large" => Ok(self.large),
            other => Err(KarlError::Config(format!("unknown size preset {other:?}"))),
        }
    }

    /// The shared config with this cell's value applied.
    pub fn cell_config(&self, shared: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = shared.clone();
        let m = &mut cfg.model;
        let num = || {
            value
                .parse::<usize>()
                .map_err(|_| KarlError::Config(format!("sweep value {value:?} is not an integer")))
        };
        match self.axis {
            SweepAxis::EncoderWidth => m.enc_width = num()?,
            SweepAxis::EncoderDepth => m.enc_depth = num()?,
            SweepAxis::DecoderWidth => m.dec_width = num()?,
            SweepAxis::DecoderDepth => m.dec_depth = num()?,
            SweepAxis::CodebookSize => m.codebook_size = num()?,
            SweepAxis::ContinuousVsDiscrete => {
                m.latent_mode = match value {
                    "continuous" => TokenMode::Continuous,
                    "discrete" => TokenMode::Discrete,
                    other => return Err(KarlError::Config(format!("unknown latent mode {other:?}"))),
                }
            }
            SweepAxis::EncoderDecoder => {
                let (e, d) = value
                    .split_once('/')
                    .ok_or_else(|| KarlError::Config(format!("expected enc/dec pair, got {value:?}")))?;
                let (e, d) = (self.preset(e)?, self.preset(d)?);
                m.enc_width = e.width;
                m.enc_depth = e.depth;
                m.dec_width = d.width;
                m.dec_depth = d.depth;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Point on a cell's variable-token curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub tokens_used: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Done,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub status: CellStatus,
    pub model_digest: String,
    /// `(token count, pixel ℓ1)` with every token active.
    pub fixed: Vec<(usize, f64)>,
    pub variable: Vec<CurvePoint>,
}

impl CellResult {
    /// Pixel ℓ1 on the variable-token curve at `tokens` mean active tokens,
    /// interpolated linearly and held flat outside the measured range.
    pub fn l1_at_tokens(&self, tokens: f64) -> Option<f64> {
        let mut pts: Vec<(f64, f64)> = self.variable.iter().map(|p| (p.tokens_used, p.l1)).collect();
        if pts.is_empty() {
            return None;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 = a.1.min(b.1);
                true
            } else {
                false
            }
        });
        Some(interpolate(&pts, tokens))
    }

    fn token_range(&self) -> Option<(f64, f64)> {
        let t = self.variable.iter().map(|p| p.tokens_used);
        let lo = t.clone().fold(f64::INFINITY, f64::min);
        let hi = t.fold(f64::NEG_INFINITY, f64::max);
        lo.is_finite().then_some((lo, hi))
    }
}

fn interpolate(pts: &[(f64, f64)], x: f64) -> f64 {
    if x <= pts[0].0 {
        return pts[0].1;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    pts[pts.len() - 1].1
}

/// Cells ranked by variable-token ℓ1 at one shared token count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedScore {
    pub tokens: f64,
    /// `(label, ℓ1)`, best first.
    pub ranking: Vec<(String, f64)>,
}

impl MatchedScore {
    pub fn best(&self) -> Option<&str> {
        self.ranking.first().map(|(l, _)| l.as_str())
    }

    pub fn worst(&self) -> Option<&str> {
        self.ranking.last().map(|(l, _)| l.as_str())
    }
}

/// Compares finished cells at the middle of the token range they all cover;
/// if the ranges do not overlap, at the mean of the cells' midpoints.
pub fn matched_token_score(cells: &[CellResult]) -> Option<MatchedScore> {
    let done: Vec<&CellResult> = cells.iter().filter(|c| c.status == CellStatus::Done).collect();
    let ranges: Vec<(f64, f64)> = done.iter().filter_map(|c| c.token_range()).collect();
    if ranges.is_empty() || ranges.len() != done.len() {
        return None;
    }
    let lo = ranges.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let hi = ranges.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let tokens = if lo <= hi {
        (lo + hi) / 2.0
    } else {
        ranges.iter().map(|r| (r.0 + r.1) / 2.0).sum::<f64>() / ranges.len() as f64
    };
    let mut ranking: Vec<(String, f64)> = done
        .iter()
        .map(|c| (c.label.clone(), c.l1_at_tokens(tokens).expect("nonempty curve")))
        .collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
    Some(MatchedScore { tokens, ranking })
}

fn cell_dir_name(label: &str) -> String {
    label.replace('/', "-")
}

fn evaluate_cell(
    spec: &SweepSpec,
    cfg: &ExperimentConfig,
    label: &str,
    base: &BaseTokenizer,
    train: &[Image],
    val: &[Image],
    dir: &Path,
    log: &mut dyn Write,
) -> Result<CellResult> {
    let (model, _) = fit_model(cfg, base, train, val, log)?;
    checkpoint::save_model(dir.join(MODEL_CHECKPOINT), &model)?;
    let fixed = eval_fixed_tokens(&model, base, val, &cfg.model.budget_grid)?
        .into_iter()
        .map(|(t, r)| (t, r.l1_x10 / 10.0))
        .collect();
    let variable = eval_variable_tokens(&model, base, val, &spec.eps_values)?
        .into_iter()
        .map(|(eps, r, _)| CurvePoint {
            eps,
            tokens_used: r.tokens_used,
            l1: r.l1_x10 / 10.0,
        })
        .collect();
    Ok(CellResult {
        label: label.to_string(),
        status: CellStatus::Done,
        model_digest: cfg.model_digest(),
        fixed,
        variable,
    })
}

/// Runs (or resumes) every cell of `spec`, then writes `curves.csv` and
/// `summary.json` to `out_dir`.
pub fn run_sweep(
    spec: &SweepSpec,
    shared: &ExperimentConfig,
    base: &BaseTokenizer,
    train: &[Image],
    val: &[Image],
    out_dir: &Path,
) -> Result<Vec<CellResult>> {
    fs::create_dir_all(out_dir).map_err(|e| KarlError::io(out_dir, e))?;
    let mut results = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let dir = out_dir.join(cell_dir_name(value));
        let result_path = dir.join("result.json");
        let cfg = spec.cell_config(shared, value)?;
        if let Ok(text) = fs::read_to_string(&result_path) {
            if let Ok(prev) = serde_json::from_str::<CellResult>(&text) {
                if prev.status == CellStatus::Done && prev.model_digest == cfg.model_digest() {
                    log::info!("sweep cell {value}: reusing {}", result_path.display());
                    results.push(prev);
                    continue;
                }
            }
        }
        fs::create_dir_all(&dir).map_err(|e| KarlError::io(&dir, e))?;
        let log_path = dir.join(crate::pipeline::METRICS_LOG);
        let mut log = fs::File::create(&log_path).map_err(|e| KarlError::io(&log_path, e))?;
        let result = match evaluate_cell(spec, &cfg, value, base, train, val, &dir, &mut log) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("sweep cell {value} failed: {e}");
                CellResult {
                    label: value.clone(),
                    status: CellStatus::Failed(e.to_string()),
                    model_digest: cfg.model_digest(),
                    fixed: Vec::new(),
                    variable: Vec::new(),
                }
            }
        };
        fs::write(&result_path, serde_json::to_string_pretty(&result)?).map_err(|e| KarlError::io(&result_path, e))?;
        results.push(result);
    }
    write_curves(&out_dir.join("curves.csv"), &results)?;
    let summary = serde_json::json!({
        "axis": spec.axis,
        "cells": results,
        "matched": matched_token_score(&results),
    });
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| KarlError::io(&path, e))?;
    Ok(results)
}

/// One row per curve point: `cell,regime,eps,tokens,l1`.
pub fn write_curves(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut out = String::from("cell,regime,eps,tokens,l1\n");
    for c in cells {
        for (t, l1) in &c.fixed {
            out.push_str(&format!("{},fixed,,{t},{l1}\n", c.label));
        }
        for p in &c.variable {
            out.push_str(&format!("{},variable,{},{},{}\n", c.label, p.eps, p.tokens_used, p.l1));
        }
    }
    fs::write(path, out).map_err(|e| KarlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(label: &str, pts: &[(f64, f64)]) -> CellResult {
        CellResult {
            label: label.into(),
            status: CellStatus::Done,
            model_digest: String::new(),
            fixed: Vec::new(),
            variable: pts
                .iter()
                .map(|&(t, l1)| CurvePoint {
                    eps: 0.0,
                    tokens_used: t,
                    l1,
                })
                .collect(),
        }
    }

    #[test]
    fn interpolation_is_linear_and_flat_outside() {
        let c = cell("a", &[(8.0, 0.1), (4.0, 0.3)]);
        assert!((c.l1_at_tokens(6.0).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(c.l1_at_tokens(2.0), Some(0.3));
        assert_eq!(c.l1_at_tokens(20.0), Some(0.1));
    }

    #[test]
    fn matched_score_uses_the_shared_range() {
        let cells = vec![
            cell("a", &[(4.0, 0.3), (12.0, 0.1)]),
            cell("b", &[(6.0, 0.2), (16.0, 0.15)]),
            CellResult {
                status: CellStatus::Failed("boom".into()),
                ..cell("c", &[])
            },
        ];
        let s = matched_token_score(&cells).unwrap();
        assert_eq!(s.tokens, 9.0);
        assert_eq!(s.ranking.len(), 2);
        assert_eq!(s.best(), Some("a"));
        assert_eq!(s.worst(), Some("b"));
    }

    #[test]
    fn cell_configs_apply_presets() {
        let spec = SweepSpec::encoder_decoder(SizePreset { width: 16, depth: 1 }, SizePreset { width: 32, depth: 3 });
        let cfg = spec.cell_config(&ExperimentConfig::default(), "small/large").unwrap();
        assert_eq!((cfg.model.enc_width, cfg.model.enc_depth), (16, 1));
        assert_eq!((cfg.model.dec_width, cfg.model.dec_depth), (32, 3));
        assert!(spec.cell_config(&ExperimentConfig::default(), "tiny/large").is_err());
        assert!("width".parse::<SweepAxis>().is_err());
    }
}
