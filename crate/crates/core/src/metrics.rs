//! Reconstruction metrics and the three evaluation protocols.

use serde::{Deserialize, Serialize};

use crate::base::BaseTokenizer;
use crate::error::{KarlError, Result};
use crate::image::Image;
use crate::model::KarlModel;

const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(KarlError::Input(format!(
            "shape mismatch {:?} vs {:?} ({} / {})",
            a.shape(),
            b.shape(),
            a.id,
            b.id
        )));
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn pixel_l1(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.pixels.len() as f64;
    Ok(a.pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for unit data range; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.pixels.len() as f64;
    let mse = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Mean SSIM over all valid 7×7 windows and channels.
///
/// Uniform window, sample (N-1) covariance, unit data range. Images smaller
/// than the window use a single window covering the whole image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, c) = a.shape();
    let win = SSIM_WINDOW.min(h).min(w);
    if win < 2 {
        return Err(KarlError::Input("ssim needs images of at least 2×2".into()));
    }
    let n = (win * win) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = a.pixels.index_axis(ndarray::Axis(2), ch);
        let y = b.pixels.index_axis(ndarray::Axis(2), ch);
        let ix = Integral::new(h, w, |i, j| x[[i, j]]);
        let iy = Integral::new(h, w, |i, j| y[[i, j]]);
        let ixx = Integral::new(h, w, |i, j| x[[i, j]] * x[[i, j]]);
        let iyy = Integral::new(h, w, |i, j| y[[i, j]] * y[[i, j]]);
        let ixy = Integral::new(h, w, |i, j| x[[i, j]] * y[[i, j]]);
        for i in 0..=h - win {
            for j in 0..=w - win {
                let mx = ix.window(i, j, win) / n;
                let my = iy.window(i, j, win) / n;
                let vx = cov_norm * (ixx.window(i, j, win) / n - mx * mx);
                let vy = cov_norm * (iyy.window(i, j, win) / n - my * my);
                let cxy = cov_norm * (ixy.window(i, j, win) / n - mx * my);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Summed-area table with a zero border row and column.
struct Integral {
    w: usize,
    s: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut s = vec![0.0; (h + 1) * (w + 1)];
        for i in 0..h {
            for j in 0..w {
                s[(i + 1) * (w + 1) + j + 1] =
                    f(i, j) + s[i * (w + 1) + j + 1] + s[(i + 1) * (w + 1) + j] - s[i * (w + 1) + j];
            }
        }
        Self { w: w + 1, s }
    }

    fn window(&self, i: usize, j: usize, k: usize) -> f64 {
        let at = |r: usize, c: usize| self.s[r * self.w + c];
        at(i + k, j + k) - at(i, j + k) - at(i + k, j) + at(i, j)
    }
}

/// Dataset means. `l1_x10` is ten times the pixel ℓ1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l1_x10: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub tokens_used: f64,
    pub runs: usize,
}

#[derive(Default)]
struct Accum {
    l1: f64,
    psnr: f64,
    ssim: f64,
    tokens: f64,
    n: usize,
}

impl Accum {
    fn push(&mut self, image: &Image, rec: &Image, tokens: usize) -> Result<f64> {
        let l1 = pixel_l1(image, rec)?;
        self.l1 += l1;
        self.psnr += psnr(image, rec)?;
        self.ssim += ssim(image, rec)?;
        self.tokens += tokens as f64;
        self.n += 1;
        Ok(l1)
    }

    fn report(&self) -> MetricReport {
        let n = self.n.max(1) as f64;
        MetricReport {
            l1_x10: 10.0 * self.l1 / n,
            psnr: self.psnr / n,
            ssim: self.ssim / n,
            tokens_used: self.tokens / n,
            runs: self.n,
        }
    }
}

fn nonempty(dataset: &[Image]) -> Result<()> {
    if dataset.is_empty() {
        return Err(KarlError::Input("evaluation dataset is empty".into()));
    }
    Ok(())
}

/// Encodes at `budget` with ε = 0 and decodes every token.
pub fn fixed_budget_reconstruction(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    budget: usize,
) -> Result<(Image, f64)> {
    let cond = model.loss_table().condition(0);
    let grid = base.encode2d(image)?;
    let (z, _) = model.encode(&grid, budget, &cond)?;
    let z = if model.is_quantized() { model.quantize(&z)?.0 } else { z };
    let pred = model.decode(&z, base)?;
    let mut rec = base.decode2d(&pred)?;
    rec.id = image.id.clone();
    let err = pixel_l1(image, &rec)?;
    Ok((rec, err))
}

/// One report per token count, each using every token of a fresh encoding
/// at that count.
pub fn eval_fixed_tokens(
    model: &KarlModel,
    base: &BaseTokenizer,
    dataset: &[Image],
    counts: &[usize],
) -> Result<Vec<(usize, MetricReport)>> {
    nonempty(dataset)?;
    counts
        .iter()
        .map(|&t| {
            model.check_budget(t)?;
            let mut acc = Accum::default();
            for img in dataset {
                let (rec, _) = fixed_budget_reconstruction(model, base, img, t)?;
                acc.push(img, &rec, t)?;
            }
            Ok((t, acc.report()))
        })
        .collect()
}

/// Per-image outcome of a variable-token evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableRecord {
    pub image_id: String,
    pub tokens_used: usize,
    pub error: f64,
    pub masked: bool,
}

/// Single-pass adaptive evaluation at budget `T_max` for each target ε.
///
/// Fails if any image needed more than one encoder or decoder pass.
pub fn eval_variable_tokens(
    model: &KarlModel,
    base: &BaseTokenizer,
    dataset: &[Image],
    eps_values: &[f64],
) -> Result<Vec<(f64, MetricReport, Vec<VariableRecord>)>> {
    nonempty(dataset)?;
    let t_max = model.config.t_max;
    eps_values
        .iter()
        .map(|&eps| {
            let mut acc = Accum::default();
            let mut records = Vec::with_capacity(dataset.len());
            for img in dataset {
                let (rec, est, _) = model.reconstruct_counted(base, img, t_max, eps, model.config.threshold)?;
                if (est.passes.encoder, est.passes.decoder) != (1, 1) {
                    return Err(KarlError::Input(format!(
                        "image {} took {:?} passes in variable evaluation",
                        img.id, est.passes
                    )));
                }
                let error = acc.push(img, &rec, est.t_hat)?;
                records.push(VariableRecord {
                    image_id: img.id.clone(),
                    tokens_used: est.t_hat,
                    error,
                    masked: est.t_hat < t_max,
                });
            }
            Ok((eps, acc.report(), records))
        })
        .collect()
}

/// How often masked reconstructions miss the requested ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub eps: f64,
    pub images: usize,
    pub masked: usize,
    /// `(margin, fraction of masked images with error > eps + margin)`.
    pub exceed: Vec<(f64, f64)>,
    /// Mean `error - eps` over masked images that exceeded ε.
    pub avg_err_exceed: Option<f64>,
    pub mean_tokens: f64,
}

pub const THRESHOLD_MARGINS: [f64; 6] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05];

pub fn threshold_satisfaction(
    model: &KarlModel,
    base: &BaseTokenizer,
    dataset: &[Image],
    eps: f64,
) -> Result<ThresholdReport> {
    let (_, report, records) = eval_variable_tokens(model, base, dataset, &[eps])?.remove(0);
    Ok(summarize_threshold(eps, &records, report.tokens_used))
}

pub fn summarize_threshold(eps: f64, records: &[VariableRecord], mean_tokens: f64) -> ThresholdReport {
    let masked: Vec<&VariableRecord> = records.iter().filter(|r| r.masked).collect();
    let exceed = THRESHOLD_MARGINS
        .iter()
        .map(|&m| {
            let k = masked.iter().filter(|r| r.error > eps + m).count();
            (
                m,
                if masked.is_empty() {
                    0.0
                } else {
                    k as f64 / masked.len() as f64
                },
            )
        })
        .collect();
    let over: Vec<f64> = masked.iter().filter(|r| r.error > eps).map(|r| r.error - eps).collect();
    ThresholdReport {
        eps,
        images: records.len(),
        masked: masked.len(),
        exceed,
        avg_err_exceed: (!over.is_empty()).then(|| over.iter().sum::<f64>() / over.len() as f64),
        mean_tokens,
    }
}

impl ThresholdReport {
    pub fn fraction_exceeding(&self, margin: f64) -> Option<f64> {
        self.exceed
            .iter()
            .find(|(m, _)| (m - margin).abs() < 1e-12)
            .map(|(_, f)| *f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn img(f: impl Fn(usize, usize, usize) -> f64) -> Image {
        Image::new("t", Array3::from_shape_fn((12, 10, 2), |(i, j, c)| f(i, j, c))).unwrap()
    }

    #[test]
    fn identical_images_are_perfect() {
        let a = img(|i, j, c| ((i * 7 + j * 3 + c) % 11) as f64 / 10.0);
        assert_eq!(pixel_l1(&a, &a).unwrap(), 0.0);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l1_and_psnr_of_constant_offset() {
        let a = Image::filled("a", 8, 8, 3, 0.2);
        let b = Image::filled("b", 8, 8, 3, 0.3);
        assert!((pixel_l1(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Image::filled("a", 8, 8, 3, 0.2);
        let b = Image::filled("b", 8, 4, 3, 0.2);
        assert!(pixel_l1(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn threshold_summary_counts_masked_only() {
        let rec = |e: f64, masked: bool| VariableRecord {
            image_id: String::new(),
            tokens_used: 1,
            error: e,
            masked,
        };
        let r = summarize_threshold(
            0.05,
            &[rec(0.04, true), rec(0.07, true), rec(0.5, false), rec(0.09, true)],
            1.0,
        );
        assert_eq!(r.masked, 3);
        assert!((r.fraction_exceeding(0.0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.fraction_exceeding(0.03).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.avg_err_exceed.unwrap() - 0.03).abs() < 1e-12);
        let none = summarize_threshold(0.05, &[rec(0.5, false)], 16.0);
        assert_eq!(none.masked, 0);
        assert_eq!(none.avg_err_exceed, None);
    }
}
