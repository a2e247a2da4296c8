#![allow(dead_code)]

use karl_core::config::{BaseConfig, ExperimentConfig, ModelConfig, TokenMode};
use karl_core::data::{make_synthetic, DatasetSpec, Family, Split};
use karl_core::training::{iteration_loss, LossWeights, Stage, Target};
use karl_core::{BaseTokenizer, EpsilonCondition, Image, KarlModel};

/// D1 = 8, T_max = 4, G = 4 (8×8 images, 4×4 patches), K = 8.
pub fn tiny_config(latent: TokenMode, base_mode: TokenMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.base = BaseConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        base_dim: 6,
        base_hidden: 10,
        base_mode,
        base_codebook_size: 8,
    };
    cfg.model = ModelConfig {
        enc_width: 8,
        enc_depth: 1,
        dec_width: 8,
        dec_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        t_max: 4,
        budget_grid: vec![2, 4],
        latent_mode: latent,
        codebook_size: 8,
        code_dim: 3,
        threshold: 0.75,
        // the top entry exceeds any achievable ℓ1, so a fixed condition never
        // trips the out-of-table fallback
        loss_table: vec![0.0, 0.05, 1.0],
        // detaching makes the tape's encoder gradient differ from the
        // derivative of the total loss by design
        detach_halting: false,
        halt_hidden: 4,
    };
    cfg
}

pub fn tiny_image(cfg: &ExperimentConfig, family: Family) -> Image {
    let spec = DatasetSpec::synthetic(Split::Val, cfg.base.image_size, cfg.base.channels, 1, 11);
    make_synthetic(family, &spec, &cfg.data).remove(0)
}

/// Whether a parameter's gradient bypasses the straight-through estimator.
pub fn is_exact_param(name: &str, latent: TokenMode) -> bool {
    match latent {
        TokenMode::Continuous => true,
        TokenMode::Discrete => name.starts_with("dec.") || name.starts_with("quant.out") || name.starts_with("halt"),
    }
}

pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
}

/// Central differences of `L_EIC + L_LTC` against the tape's gradients, for
/// every parameter tensor accepted by `select`. Relative error is
/// `‖a − f‖ / max(‖a‖ + ‖f‖, 1e-12)` per tensor.
pub fn gradient_check(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    budget: usize,
    eps_cond: EpsilonCondition,
    stage: Stage,
    select: impl Fn(&str) -> bool,
) -> Vec<GradCheck> {
    let weights = LossWeights {
        beta: 0.25,
        lambda: 1.0,
        dense_halting: 0.0,
    };
    let target = Target::new(base, image).unwrap();
    let loss = |m: &KarlModel| {
        let (g, total, _) = iteration_loss(m, base, &target, budget, eps_cond, stage, weights).unwrap();
        g.scalar(total)
    };
    let (g, total, _) = iteration_loss(model, base, &target, budget, eps_cond, stage, weights).unwrap();
    let analytic = g.backward(total).for_store(&g, &model.store);
    let h = 1e-5;
    let mut out = Vec::new();
    let ids: Vec<_> = model.store.ids().collect();
    for (id, a) in ids.into_iter().zip(analytic) {
        let name = model.store.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let mut probe = model.clone();
        let mut diff2 = 0.0;
        let mut norm_a = 0.0;
        let mut norm_f = 0.0;
        for k in 0..a.len() {
            let (r, c) = (k / a.ncols(), k % a.ncols());
            let orig = probe.store.get(id)[[r, c]];
            probe.store.get_mut(id)[[r, c]] = orig + h;
            let up = loss(&probe);
            probe.store.get_mut(id)[[r, c]] = orig - h;
            let down = loss(&probe);
            probe.store.get_mut(id)[[r, c]] = orig;
            let f = (up - down) / (2.0 * h);
            diff2 += (a[[r, c]] - f).powi(2);
            norm_a += a[[r, c]].powi(2);
            norm_f += f * f;
        }
        let (norm_a, norm_f) = (norm_a.sqrt(), norm_f.sqrt());
        out.push(GradCheck {
            name,
            rel_err: diff2.sqrt() / (norm_a + norm_f).max(1e-12),
            analytic_norm: norm_a,
        });
    }
    out
}
