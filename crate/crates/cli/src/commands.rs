use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use karl_core::config::DataSource;
use karl_core::data::{load_folder, load_split, DatasetSpec};
use karl_core::kc::{histogram, kc_oracle_search, spearman, spearman_p_value};
use karl_core::metrics::{eval_fixed_tokens, eval_variable_tokens, summarize_threshold, THRESHOLD_MARGINS};
use karl_core::pipeline::{self, BASE_CHECKPOINT, METRICS_LOG, MODEL_CHECKPOINT, TRAINING_SUMMARY};
use karl_core::sweep::{matched_token_score, run_sweep, CellStatus, SizePreset, SweepAxis, SweepSpec};
use karl_core::{kc_one_pass, BaseTokenizer, ExperimentConfig, Family, Image, KarlError, KarlModel, Split};

use crate::plot::{line_chart, Series};
use crate::run::{apply_determinism, checkpoint_paths, require_file, resolve_config, RunDir};
use crate::{Common, EvalMode, ModelArgs};

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

pub fn train_base(common: &Common) -> Result<()> {
    let cfg = apply_determinism(resolve_config(common.config.as_deref(), None)?);
    let mut run = RunDir::create(&out_dir(common, &cfg), &cfg)?;
    run.write_config(&cfg)?;
    let (train, val) = pipeline::load_data(&cfg)?;
    let (base, fit_l1) = pipeline::ensure_base(&cfg, &train, &run.path)?;
    run.note(BASE_CHECKPOINT);
    let mut total = 0.0;
    for img in &val {
        let rec = base.decode2d(&base.encode2d(img)?)?;
        total += karl_core::metrics::pixel_l1(img, &rec)?;
    }
    let val_l1 = total / val.len() as f64;
    println!("base tokenizer: grid {} tokens, val l1 {val_l1:.4}", base.grid_tokens());
    run.write_json(
        "base_eval.json",
        &serde_json::json!({ "train_final_l1": fit_l1, "val_l1": val_l1, "val_images": val.len() }),
    )?;
    run.finish("train-base")
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = apply_determinism(resolve_config(common.config.as_deref(), None)?);
    let mut run = RunDir::create(&out_dir(common, &cfg), &cfg)?;
    run.write_config(&cfg)?;
    let summary = pipeline::run_training(&cfg, &run.path)?;
    for f in [BASE_CHECKPOINT, MODEL_CHECKPOINT, METRICS_LOG, TRAINING_SUMMARY] {
        run.note(f);
    }
    let r = &summary.report;
    println!(
        "trained {} iterations: loss {:.4} -> {:.4}, curriculum violations {}",
        r.iterations, r.first_total, r.last_total, r.curriculum_violations
    );
    if let Some(l1) = r.stage2_val_l1.or(r.stage1_val_l1) {
        println!("validation l1 {l1:.4}");
    }
    println!("config digest {}", summary.config_digest);
    run.finish("train")
}

struct Loaded {
    cfg: ExperimentConfig,
    model: KarlModel,
    base: BaseTokenizer,
    images: Vec<Image>,
    run: RunDir,
}

fn load(common: &Common, args: &ModelArgs) -> Result<Loaded> {
    let ckpt = args
        .checkpoint
        .clone()
        .or_else(|| common.out.clone())
        .context("--checkpoint or --out is required")?;
    let ckpt_dir = if ckpt.is_dir() {
        ckpt.clone()
    } else {
        ckpt.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    let cfg = resolve_config(common.config.as_deref(), Some(&ckpt_dir))?;
    let (model_path, base_path) = checkpoint_paths(&ckpt);
    require_file(&model_path)?;
    require_file(&base_path)?;
    let (model, base) = pipeline::load_pair(&cfg, &model_path, &base_path)?;
    let images = load_dataset(&cfg, &args.dataset)?;
    let out = common.out.clone().unwrap_or(ckpt_dir);
    let run = RunDir::create(&out, &cfg)?;
    Ok(Loaded {
        cfg,
        model,
        base,
        images,
        run,
    })
}

fn load_dataset(cfg: &ExperimentConfig, which: &str) -> Result<Vec<Image>> {
    let (res, ch) = (cfg.base.image_size, cfg.base.channels);
    Ok(match which {
        "val" => load_split(&cfg.data, res, ch, Split::Val)?,
        "train" => load_split(&cfg.data, res, ch, Split::Train)?,
        path => {
            let p = Path::new(path);
            if !p.is_dir() {
                return Err(KarlError::Data(format!("dataset {path:?} is neither val, train nor a folder")).into());
            }
            let spec = DatasetSpec {
                source: DataSource::Folder,
                split: Split::Train,
                resolution: res,
                channels: ch,
                seed: cfg.data.data_seed,
                size: 0,
            };
            load_folder(p, &spec, 0.0)?
        }
    })
}

pub fn eval(common: &Common, args: &ModelArgs, mode: EvalMode, eps: &[f64]) -> Result<()> {
    let Loaded {
        cfg,
        model,
        base,
        images,
        mut run,
    } = load(common, args)?;
    match mode {
        EvalMode::Fixed => {
            let reports = eval_fixed_tokens(&model, &base, &images, &cfg.model.budget_grid)?;
            println!("{:>6} {:>9} {:>8} {:>7}", "tokens", "l1", "psnr", "ssim");
            let mut rows = Vec::new();
            for (t, r) in &reports {
                println!("{t:>6} {:>9.4} {:>8.2} {:>7.4}", r.l1_x10 / 10.0, r.psnr, r.ssim);
                rows.push(format!("{t},{},{},{}", r.l1_x10 / 10.0, r.psnr, r.ssim));
            }
            run.write_csv("eval_fixed.csv", "tokens,l1,psnr,ssim", &rows)?;
            run.write_json("eval_fixed.json", &reports)?;
            let pts = reports.iter().map(|(t, r)| (*t as f64, r.l1_x10 / 10.0)).collect();
            run.write_text(
                "eval_fixed.svg",
                &line_chart(
                    "Fixed-token reconstruction",
                    "tokens",
                    "pixel l1",
                    &[Series::new("l1", pts)],
                ),
            )?;
        }
        EvalMode::Variable => {
            let eps = if eps.is_empty() {
                vec![0.03, 0.05, 0.09]
            } else {
                eps.to_vec()
            };
            let before = model.passes();
            let results = eval_variable_tokens(&model, &base, &images, &eps)?;
            let after = model.passes();
            let runs = (images.len() * eps.len()) as f64;
            println!(
                "passes per image: {} encoder + {} decoder",
                (after.encoder - before.encoder) as f64 / runs,
                (after.decoder - before.decoder) as f64 / runs
            );
            println!("{:>6} {:>8} {:>9} {:>8} {:>7}", "eps", "tokens", "l1", "psnr", "ssim");
            let mut rows = Vec::new();
            for (e, r, _) in &results {
                println!(
                    "{e:>6.3} {:>8.2} {:>9.4} {:>8.2} {:>7.4}",
                    r.tokens_used,
                    r.l1_x10 / 10.0,
                    r.psnr,
                    r.ssim
                );
                rows.push(format!(
                    "{e},{},{},{},{}",
                    r.tokens_used,
                    r.l1_x10 / 10.0,
                    r.psnr,
                    r.ssim
                ));
            }
            run.write_csv("eval_variable.csv", "eps,tokens_used,l1,psnr,ssim", &rows)?;
            run.write_json("eval_variable.json", &results)?;
            let pts = results
                .iter()
                .map(|(_, r, _)| (r.tokens_used, r.l1_x10 / 10.0))
                .collect();
            run.write_text(
                "eval_variable.svg",
                &line_chart(
                    "Adaptive reconstruction",
                    "mean tokens used",
                    "pixel l1",
                    &[Series::new("l1", pts)],
                ),
            )?;
        }
        EvalMode::Threshold => {
            let eps = if eps.is_empty() { vec![0.05] } else { eps.to_vec() };
            let results = eval_variable_tokens(&model, &base, &images, &eps)?;
            let reports: Vec<_> = results
                .iter()
                .map(|(e, r, recs)| summarize_threshold(*e, recs, r.tokens_used))
                .collect();
            print!("{:>8}", "margin");
            for r in &reports {
                print!(" {:>12}", format!("eps={:.3}", r.eps));
            }
            println!();
            let mut rows = Vec::new();
            for m in THRESHOLD_MARGINS {
                print!("{:>8}", format!("+{m:.2}"));
                let mut row = format!("{m}");
                for r in &reports {
                    let f = r.fraction_exceeding(m).unwrap_or(0.0);
                    print!(" {f:>12.3}");
                    row.push_str(&format!(",{f}"));
                }
                println!();
                rows.push(row);
            }
            for r in &reports {
                println!(
                    "eps {:.3}: {} of {} images masked, mean tokens {:.2}, mean excess {}",
                    r.eps,
                    r.masked,
                    r.images,
                    r.mean_tokens,
                    r.avg_err_exceed.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            let header = std::iter::once("margin".to_string())
                .chain(reports.iter().map(|r| format!("eps_{}", r.eps)))
                .collect::<Vec<_>>()
                .join(",");
            run.write_csv("threshold.csv", &header, &rows)?;
            run.write_json("threshold.json", &reports)?;
            let series: Vec<Series> = reports
                .iter()
                .map(|r| Series::new(format!("eps {:.3}", r.eps), r.exceed.clone()))
                .collect();
            run.write_text(
                "threshold.svg",
                &line_chart("Masked images above eps + margin", "margin", "fraction", &series),
            )?;
        }
    }
    let name = match mode {
        EvalMode::Fixed => "eval fixed",
        EvalMode::Variable => "eval variable",
        EvalMode::Threshold => "eval threshold",
    };
    run.finish(name)
}

fn family_of(id: &str) -> String {
    Family::of_id(id).map_or_else(|| "other".to_string(), |f| f.name().to_string())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn kc(
    common: &Common,
    args: &ModelArgs,
    eps: f64,
    oracle: bool,
    budget: Option<usize>,
    bucket_width: Option<usize>,
) -> Result<()> {
    let Loaded {
        cfg,
        model,
        base,
        images,
        mut run,
    } = load(common, args)?;
    let budget = budget.unwrap_or(cfg.model.t_max);
    model.check_budget(budget)?;
    let step = cfg.model.grid_step();
    let width = bucket_width.unwrap_or(step);
    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    let mut pairs = Vec::new();
    for img in &images {
        let est = kc_one_pass(&model, &base, img, budget, eps, cfg.model.threshold)?;
        let fam = family_of(&img.id);
        let mut line = format!("{} {fam} t_hat={} err={:.4}", img.id, est.t_hat, est.achieved_err);
        let mut row = format!("{},{fam},{},{}", img.id, est.t_hat, est.achieved_err);
        if oracle {
            let o = kc_oracle_search(&model, &base, img, eps, &cfg.model.budget_grid)?;
            line.push_str(&format!(" oracle={}", o.t_hat));
            row.push_str(&format!(",{},{}", o.t_hat, o.satisfied));
            pairs.push((est.t_hat as f64, o.t_hat as f64));
        }
        println!("{line}");
        rows.push(row);
        per_image.push((img.id.clone(), est.t_hat));
    }
    let header = if oracle {
        "image,family,t_hat,error,oracle,oracle_satisfied"
    } else {
        "image,family,t_hat,error"
    };
    run.write_csv("kc.csv", header, &rows)?;

    let hist = histogram(per_image.clone(), width);
    println!("buckets (width {width}):");
    for (lo, n) in &hist.buckets {
        println!("  {:>3}-{:<3} {n}", lo + 1, lo + width);
    }
    let mut families: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, t) in &per_image {
        families.entry(family_of(id)).or_default().push(*t as f64);
    }
    let mut means: Vec<(String, f64)> = families
        .into_iter()
        .map(|(f, v)| (f, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    means.sort_by(|a, b| a.1.total_cmp(&b.1));
    let ordering = means
        .iter()
        .map(|(f, m)| format!("{f} ({m:.2})"))
        .collect::<Vec<_>>()
        .join(" < ");
    println!("mean t_hat {:.2}; family ordering: {ordering}", hist.mean_t_hat);

    let agreement = if oracle {
        let diffs: Vec<f64> = pairs.iter().map(|(a, b)| (a - b).abs()).collect();
        let within = diffs.iter().filter(|d| **d <= step as f64).count() as f64 / diffs.len() as f64;
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let rho = spearman(&a, &b);
        let p = spearman_p_value(rho, a.len());
        let med = median(diffs);
        println!(
            "oracle agreement: median |t_hat - oracle| {med:.2} (grid step {step}), within one step {:.1}%, spearman {rho:.3} (p {p:.2e})",
            100.0 * within
        );
        Some(serde_json::json!({
            "median_abs_diff": med,
            "within_one_step": within,
            "spearman": rho,
            "spearman_p": p,
        }))
    } else {
        None
    };
    run.write_json(
        "kc_summary.json",
        &serde_json::json!({
            "eps": eps,
            "budget": budget,
            "histogram": hist,
            "family_means": means,
            "oracle": agreement,
        }),
    )?;
    let bars: Vec<(f64, f64)> = hist
        .buckets
        .iter()
        .map(|(lo, n)| ((lo + width) as f64, *n as f64))
        .collect();
    run.write_text(
        "kc_buckets.svg",
        &line_chart(
            "Images per complexity bucket",
            "t_hat bucket upper edge",
            "images",
            &[Series::new("count", bars)],
        ),
    )?;
    run.finish("kc")
}

fn parse_preset(s: &str) -> Result<SizePreset> {
    let (w, d) = s
        .split_once('x')
        .ok_or_else(|| KarlError::Config(format!("size preset {s:?} is not WIDTHxDEPTH")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| KarlError::Config(format!("size preset {s:?} is not WIDTHxDEPTH")))
    };
    Ok(SizePreset {
        width: parse(w)?,
        depth: parse(d)?,
    })
}

pub fn sweep(common: &Common, axis: &str, values: &[String], small: &str, large: &str) -> Result<()> {
    let cfg = apply_determinism(resolve_config(common.config.as_deref(), None)?);
    let axis: SweepAxis = axis.parse()?;
    let (small, large) = (parse_preset(small)?, parse_preset(large)?);
    let mut spec = SweepSpec::encoder_decoder(small, large);
    spec.axis = axis;
    if !values.is_empty() {
        spec.values = values.to_vec();
    } else if axis != SweepAxis::EncoderDecoder {
        bail!(KarlError::Config("--values is required for this sweep axis".into()));
    }
    let mut run = RunDir::create(&out_dir(common, &cfg), &cfg)?;
    run.write_config(&cfg)?;
    let (train, val) = pipeline::load_data(&cfg)?;
    let (base, _) = pipeline::ensure_base(&cfg, &train, &run.path)?;
    run.note(BASE_CHECKPOINT);
    let sweep_dir = run.join("sweep");
    let cells = run_sweep(&spec, &cfg, &base, &train, &val, &sweep_dir)?;
    for c in &cells {
        run.note(Path::new("sweep").join(c.label.replace('/', "-")));
    }
    run.note("sweep/curves.csv");
    run.note("sweep/summary.json");
    for c in &cells {
        match &c.status {
            CellStatus::Done => {
                let fixed: Vec<String> = c.fixed.iter().map(|(t, l)| format!("{t}:{l:.4}")).collect();
                println!("{:<12} fixed {}", c.label, fixed.join(" "));
                let var: Vec<String> = c
                    .variable
                    .iter()
                    .map(|p| format!("{:.2}:{:.4}", p.tokens_used, p.l1))
                    .collect();
                println!("{:<12} variable {}", "", var.join(" "));
            }
            CellStatus::Failed(e) => println!("{:<12} failed: {e}", c.label),
        }
    }
    let matched = matched_token_score(&cells);
    if let Some(m) = &matched {
        let ranking = m
            .ranking
            .iter()
            .map(|(l, v)| format!("{l} {v:.4}"))
            .collect::<Vec<_>>()
            .join(", ");
        println!("l1 at {:.2} matched tokens: {ranking}", m.tokens);
        println!("best {}, worst {}", m.best().unwrap_or("-"), m.worst().unwrap_or("-"));
    }
    run.write_json(
        "sweep_summary.json",
        &serde_json::json!({ "axis": spec.axis, "cells": cells, "matched": matched }),
    )?;
    let mut series = Vec::new();
    for c in cells.iter().filter(|c| c.status == CellStatus::Done) {
        series.push(Series::new(
            format!("{} var", c.label),
            c.variable.iter().map(|p| (p.tokens_used, p.l1)).collect(),
        ));
        let mut fixed = Series::new(
            format!("{} fixed", c.label),
            c.fixed.iter().map(|(t, l)| (*t as f64, *l)).collect(),
        );
        fixed.dashed = true;
        series.push(fixed);
    }
    run.write_text(
        "sweep_curves.svg",
        &line_chart("Sweep curves", "tokens", "pixel l1", &series),
    )?;
    run.finish("sweep")
}
