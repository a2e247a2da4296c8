//! Complexity estimates: the single-pass active-token count, the exhaustive
//! prefix-search oracle it approximates, the budget-invariance probe, the
//! structure-vs-noise Δ probe and complexity bucketing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::base::BaseTokenizer;
use crate::error::{KarlError, Result};
use crate::image::Image;
use crate::metrics::pixel_l1;
use crate::model::{KarlModel, LatentSequence, Passes};

/// Predicted minimal token count for one image at one target error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KCEstimate {
    pub t_hat: usize,
    pub eps: f64,
    pub budget: usize,
    pub satisfied: bool,
    pub achieved_err: f64,
    pub passes: Passes,
}

impl KCEstimate {
    pub fn new(t_hat: usize, eps: f64, budget: usize, achieved_err: f64, passes: Passes) -> Self {
        Self {
            t_hat,
            eps,
            budget,
            satisfied: achieved_err <= eps,
            achieved_err,
            passes,
        }
    }
}

/// One encoder pass, one decoder pass: `t_hat` is the number of tokens
/// whose halting probability is below `threshold`.
pub fn kc_one_pass(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    budget: usize,
    eps: f64,
    threshold: f64,
) -> Result<KCEstimate> {
    Ok(model.reconstruct_counted(base, image, budget, eps, threshold)?.1)
}

/// Pixel ℓ1 of every grid prefix of a single `max(grid)`-token encoding
/// conditioned on `eps`.
pub fn prefix_errors(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    eps: f64,
    grid: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if grid.is_empty() || !grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(KarlError::Input("oracle grid must be nonempty and ascending".into()));
    }
    let budget = *grid.last().unwrap();
    let cond = model.loss_table().discretize(eps.max(0.0));
    let target = base.encode2d(image)?;
    let (z, _) = model.encode(&target, budget, &cond)?;
    let z = if model.is_quantized() { model.quantize(&z)?.0 } else { z };
    grid.iter()
        .map(|&t| {
            let prefix = prefix_of(&z, t);
            let pred = model.decode(&prefix, base)?;
            let rec = base.decode2d(&pred)?;
            Ok((t, pixel_l1(image, &rec)?))
        })
        .collect()
}

fn prefix_of(z: &LatentSequence, t: usize) -> LatentSequence {
    LatentSequence {
        tokens: z.tokens.slice(ndarray::s![..t, ..]).to_owned(),
        slots: z.slots[..t].to_vec(),
        budget: z.budget,
        quantized: z.quantized,
        code_indices: z.code_indices.as_ref().map(|c| c[..t].to_vec()),
    }
}

/// Smallest grid value whose prefix reconstruction reaches `eps`; the
/// largest grid value with `satisfied = false` if none does.
pub fn kc_oracle_search(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    eps: f64,
    grid: &[usize],
) -> Result<KCEstimate> {
    let errors = prefix_errors(model, base, image, eps, grid)?;
    let budget = *grid.last().unwrap();
    let passes = Passes {
        encoder: 1,
        decoder: errors.len(),
    };
    let hit = errors.iter().find(|(_, e)| *e <= eps);
    Ok(match hit {
        Some(&(t, e)) => KCEstimate::new(t, eps, budget, e, passes),
        None => {
            let &(t, e) = errors.last().unwrap();
            KCEstimate::new(t, eps, budget, e, passes)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub t_small: usize,
    pub t_large: usize,
    pub t_hat_small: usize,
    pub t_hat_large: usize,
    pub abs_diff: usize,
}

/// `t_hat` at two budgets for the same image and target.
pub fn kc_invariance_probe(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    eps: f64,
    t_small: usize,
    t_large: usize,
) -> Result<InvarianceReport> {
    if t_small > t_large {
        return Err(KarlError::Input(format!("t_small {t_small} > t_large {t_large}")));
    }
    let th = model.config.threshold;
    let small = kc_one_pass(model, base, image, t_small, eps, th)?.t_hat;
    let large = if t_small == t_large {
        small
    } else {
        kc_one_pass(model, base, image, t_large, eps, th)?.t_hat
    };
    Ok(InvarianceReport {
        t_small,
        t_large,
        t_hat_small: small,
        t_hat_large: large,
        abs_diff: small.abs_diff(large),
    })
}

/// Reconstruction error at the smallest and largest budgets.
///
/// `delta = err_low - err_high`, so a positive delta means extra tokens
/// help. Each error comes from encoding at that budget with ε = 0 and
/// decoding every token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaProbe {
    pub err_low: f64,
    pub err_high: f64,
    pub delta: f64,
}

pub fn delta_probe(model: &KarlModel, base: &BaseTokenizer, image: &Image) -> Result<DeltaProbe> {
    let lo = model.config.min_budget();
    let hi = model.config.t_max;
    let err_low = crate::metrics::fixed_budget_reconstruction(model, base, image, lo)?.1;
    let err_high = crate::metrics::fixed_budget_reconstruction(model, base, image, hi)?.1;
    Ok(DeltaProbe {
        err_low,
        err_high,
        delta: err_low - err_high,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityHistogram {
    pub bucket_width: usize,
    /// Bucket lower edge → count. Bucket `k` holds `t_hat ∈ [k·w + 1, (k+1)·w]`.
    pub buckets: BTreeMap<usize, usize>,
    pub mean_t_hat: f64,
    pub per_image: Vec<(String, usize)>,
}

/// Buckets every image by its single-pass `t_hat` at budget `T_max`.
pub fn bucket_complexity(
    model: &KarlModel,
    base: &BaseTokenizer,
    dataset: &[Image],
    eps: f64,
    bucket_width: usize,
) -> Result<ComplexityHistogram> {
    if dataset.is_empty() {
        return Err(KarlError::Input("bucket_complexity: empty dataset".into()));
    }
    if bucket_width == 0 {
        return Err(KarlError::Input("bucket_width must be positive".into()));
    }
    let t_max = model.config.t_max;
    let per_image: Vec<(String, usize)> = dataset
        .iter()
        .map(|img| {
            let est = kc_one_pass(model, base, img, t_max, eps, model.config.threshold)?;
            Ok((img.id.clone(), est.t_hat))
        })
        .collect::<Result<_>>()?;
    Ok(histogram(per_image, bucket_width))
}

pub fn histogram(per_image: Vec<(String, usize)>, bucket_width: usize) -> ComplexityHistogram {
    let mut buckets = BTreeMap::new();
    for (_, t) in &per_image {
        let lower = (t.saturating_sub(1) / bucket_width) * bucket_width;
        *buckets.entry(lower).or_insert(0) += 1;
    }
    let mean_t_hat = per_image.iter().map(|(_, t)| *t as f64).sum::<f64>() / per_image.len().max(1) as f64;
    ComplexityHistogram {
        bucket_width,
        buckets,
        mean_t_hat,
        per_image,
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// One-sided p-value for a positive Spearman correlation via the
/// `t = r·sqrt((n-2)/(1-r²))` approximation with a normal tail.
pub fn spearman_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    if r >= 1.0 {
        return 0.0;
    }
    let t = r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt();
    0.5 * erfc(t / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes erfcc, |error| < 1.2e-7
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_partitions_the_dataset() {
        let per: Vec<_> = [1, 4, 5, 8, 9, 16].iter().map(|&t| (format!("i{t}"), t)).collect();
        let h = histogram(per.clone(), 4);
        assert_eq!(h.buckets.values().sum::<usize>(), 6);
        assert_eq!(h.buckets[&0], 2);
        assert_eq!(h.buckets[&4], 2);
        let single = histogram(per, 16);
        assert_eq!(single.buckets.len(), 1);
        assert!((single.mean_t_hat - 43.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman_p_value(0.5, 200) < 1e-6);
        assert!((spearman_p_value(0.0, 200) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn estimate_flags_satisfaction() {
        let e = KCEstimate::new(3, 0.05, 16, 0.05, Passes::default());
        assert!(e.satisfied);
        assert!(!KCEstimate::new(3, 0.05, 16, 0.0501, Passes::default()).satisfied);
    }
}
