//! Loss-conditioned training.
//!
//! Each iteration runs two phases per image:
//!
//! 1. **EIC** (estimate image complexity): encode at a sampled budget `T`
//!    with ε = 0, decode with all `T` tokens, and record the achieved pixel
//!    ℓ1 as `eps0`.
//! 2. **LTC** (learn to tokenize at the estimated complexity): encode at
//!    `T_max = T + ΔT` conditioned on `eps0` rounded up to the loss table,
//!    decode from the first `T` tokens only, and supervise the halting head
//!    with labels `[0; T] ++ [1; ΔT]`.
//!
//! When `ΔT = 0` the condition is instead drawn from table entries strictly
//! below `eps0` and every token is labelled "keep".
//!
//! With `minimal_keep`, the phase-2 halting labels keep only the shortest
//! grid prefix whose last recorded phase-1 error for the same image meets
//! the condition. The phase-2 decode still uses the first `T` tokens.
//!
//! A positive `dense_halting` weight (with `minimal_keep`) adds a halting
//! loss at a uniformly drawn condition, on a separate forward-only encoding
//! under that condition, labelled from the same recorded errors. This covers
//! conditions phase 2 rarely visits, such as ones an image cannot reach.
//!
//! Both phases share one optimizer step on `L_EIC + L_LTC`.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{cosine_scale, BaseTokenizer, Grid2D};
use crate::config::{TokenMode, TrainConfig};
use crate::error::{KarlError, Result};
use crate::image::Image;
use crate::model::KarlModel;
use crate::params::{Adam, AdamConfig};
use crate::tape::{Graph, Var};

/// Clamp applied to halting probabilities before the logarithm.
pub const BCE_CLAMP: f64 = 1e-6;

/// Ascending list of admissible reconstruction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTable {
    entries: Vec<f64>,
}

/// A target reconstruction error, always a [`LossTable`] entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonCondition {
    pub value: f64,
    pub table_index: usize,
}

impl Default for LossTable {
    fn default() -> Self {
        Self {
            entries: crate::config::DEFAULT_LOSS_TABLE.to_vec(),
        }
    }
}

impl LossTable {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.first() != Some(&0.0) {
            return Err(KarlError::Config("loss_table must start at 0.0".into()));
        }
        if !entries.windows(2).all(|w| w[0] < w[1]) || entries.iter().any(|e| !e.is_finite()) {
            return Err(KarlError::Config("loss_table must be strictly ascending".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn condition(&self, index: usize) -> EpsilonCondition {
        EpsilonCondition {
            value: self.entries[index],
            table_index: index,
        }
    }

    pub fn max(&self) -> EpsilonCondition {
        self.condition(self.entries.len() - 1)
    }

    /// Smallest entry `>= eps0`, clamped to the largest entry.
    pub fn discretize(&self, eps0: f64) -> EpsilonCondition {
        match self.entries.iter().position(|&e| e >= eps0) {
            Some(i) => self.condition(i),
            None => self.max(),
        }
    }

    /// Number of entries strictly below `eps0`.
    pub fn count_below(&self, eps0: f64) -> usize {
        self.entries.iter().take_while(|&&e| e < eps0).count()
    }
}

/// Uniform draw from `grid`.
pub fn sample_budget<R: Rng + ?Sized>(rng: &mut R, grid: &[usize]) -> Result<usize> {
    grid.choose(rng)
        .copied()
        .ok_or_else(|| KarlError::Input("sample_budget: empty grid".into()))
}

/// Labels `[0; t] ++ [1; delta_t]`.
pub fn halting_labels(t: usize, delta_t: usize) -> Vec<u8> {
    let mut labels = vec![0u8; t];
    labels.resize(t + delta_t, 1);
    labels
}

/// Mean binary cross-entropy of `omega` against [`halting_labels`].
pub fn halting_loss(omega: &[f64], t: usize, delta_t: usize) -> Result<f64> {
    if omega.len() != t + delta_t {
        return Err(KarlError::Input(format!(
            "halting_loss: {} probabilities for T={t}, ΔT={delta_t}",
            omega.len()
        )));
    }
    if omega.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = omega
        .iter()
        .zip(halting_labels(t, delta_t))
        .map(|(&w, y)| {
            let p = w.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / omega.len() as f64)
}

fn halting_loss_graph(g: &mut Graph, omega: Var, t: usize, delta_t: usize) -> Var {
    let n = t + delta_t;
    let labels = Array2::from_shape_fn((n, 1), |(i, _)| if i < t { 0.0 } else { 1.0 });
    let p = g.clamp(omega, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = g.ln(p);
    let q = g.affine(p, -1.0, 1.0);
    let log_q = g.ln(q);
    let y = g.constant(labels.clone());
    let not_y = g.constant(labels.mapv(|v| 1.0 - v));
    let a = g.mul(y, log_p);
    let b = g.mul(not_y, log_q);
    let s = g.add(a, b);
    let m = g.mean(s);
    g.scale(m, -1.0)
}

/// Loss components of one phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub recon: f64,
    pub quant: f64,
    pub halt: f64,
    pub beta: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    /// Recomposes `total` from the components.
    pub fn recomposed(&self) -> f64 {
        self.recon + self.beta * self.quant + self.lambda * self.halt
    }
}

/// Where the reconstruction loss is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Against the base tokenizer's 2-D tokens (MSE, or cross-entropy on
    /// code indices in discrete base mode).
    TokenSpace,
    /// Pixel ℓ1 through the frozen base decoder.
    Pixel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    /// Weight of the halting loss at a uniformly drawn condition.
    pub dense_halting: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta: c.beta,
            lambda: c.lambda,
            dense_halting: c.dense_halting,
        }
    }
}

/// Per-image training target, computed once from the frozen base tokenizer.
#[derive(Clone, Debug)]
pub struct Target {
    pub image: Image,
    pub grid: Grid2D,
    pub patches: Array2<f64>,
}

impl Target {
    pub fn new(base: &BaseTokenizer, image: &Image) -> Result<Self> {
        Ok(Self {
            grid: base.encode2d(image)?,
            patches: image.patchify(base.config.patch_size)?,
            image: image.clone(),
        })
    }
}

struct PhaseOut {
    total: Var,
    recon: Var,
    quant: Option<Var>,
    halt: Option<Var>,
    decoded: Array2<f64>,
    code_usage: Vec<usize>,
    projected: Option<Array2<f64>>,
}

fn recon_loss(g: &mut Graph, model: &KarlModel, base: &BaseTokenizer, target: &Target, out: Var, stage: Stage) -> Var {
    match (stage, base.mode()) {
        (Stage::TokenSpace, TokenMode::Continuous) => {
            let t = g.constant(target.grid.tokens.clone());
            g.mse(out, t)
        }
        (Stage::TokenSpace, TokenMode::Discrete) => {
            let idx = target
                .grid
                .code_indices
                .as_ref()
                .expect("discrete grid carries indices");
            g.cross_entropy(out, idx)
        }
        (Stage::Pixel, _) => {
            let tokens = model.grid_to_base_tokens(g, base, out);
            let pix = base.decode_graph(g, tokens);
            let t = g.constant(target.patches.clone());
            g.l1(pix, t)
        }
    }
}

/// Encode at `budget` under `eps_index`, optionally quantize, decode from
/// the first `keep` slots.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    g: &mut Graph,
    model: &KarlModel,
    base: &BaseTokenizer,
    target: &Target,
    budget: usize,
    keep: usize,
    eps_index: usize,
    stage: Stage,
    weights: LossWeights,
    halting: Option<(usize, usize)>,
) -> PhaseOut {
    let enc = model.encode_graph(g, &target.grid.tokens, budget, eps_index);
    let (z, quant, usage, projected) = match model.quantize_graph(g, enc.z) {
        Some(q) => (q.z, Some(q.loss), q.indices, Some(q.projected)),
        None => (enc.z, None, Vec::new(), None),
    };
    let active = if keep == budget { z } else { g.slice_rows(z, 0, keep) };
    let slots: Vec<usize> = (0..keep).collect();
    let out = model.decode_graph(g, active, &slots);
    let recon = recon_loss(g, model, base, target, out, stage);
    let mut total = recon;
    if let Some(q) = quant {
        let wq = g.scale(q, weights.beta);
        total = g.add(total, wq);
    }
    let halt = halting.map(|(t, dt)| halting_loss_graph(g, enc.omega, t, dt));
    if let Some(h) = halt {
        let wh = g.scale(h, weights.lambda);
        total = g.add(total, wh);
    }
    PhaseOut {
        total,
        recon,
        quant,
        halt,
        decoded: g.value(out).clone(),
        code_usage: usage,
        projected,
    }
}

fn bundle(g: &Graph, p: &PhaseOut, weights: LossWeights, with_halt: bool) -> LossBundle {
    LossBundle {
        recon: g.scalar(p.recon),
        quant: p.quant.map_or(0.0, |q| g.scalar(q)),
        halt: p.halt.map_or(0.0, |h| g.scalar(h)),
        beta: weights.beta,
        lambda: if with_halt { weights.lambda } else { 0.0 },
        total: g.scalar(p.total),
    }
}

/// Pixel ℓ1 of the hard decode of a decoder output.
fn achieved_error(model: &KarlModel, base: &BaseTokenizer, target: &Target, decoded: &Array2<f64>) -> Result<f64> {
    let grid = model.output_to_grid(base, decoded);
    let rec = base.decode2d(&grid)?;
    crate::metrics::pixel_l1(&target.image, &rec)
}

/// Phase 1 alone: returns `eps0` and `L_EIC`.
pub fn eic_step(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    budget: usize,
    stage: Stage,
    weights: LossWeights,
) -> Result<(f64, LossBundle)> {
    model.check_budget(budget)?;
    let target = Target::new(base, image)?;
    let mut g = Graph::new();
    let p = run_phase(&mut g, model, base, &target, budget, budget, 0, stage, weights, None);
    let eps0 = achieved_error(model, base, &target, &p.decoded)?;
    Ok((eps0, bundle(&g, &p, weights, false)))
}

/// Phase 2 alone: returns `L_LTC`.
#[allow(clippy::too_many_arguments)]
pub fn ltc_step(
    model: &KarlModel,
    base: &BaseTokenizer,
    image: &Image,
    budget: usize,
    delta_t: usize,
    eps_cond: EpsilonCondition,
    stage: Stage,
    weights: LossWeights,
) -> Result<LossBundle> {
    if budget + delta_t > model.config.t_max {
        return Err(KarlError::Input(format!(
            "T + ΔT = {} exceeds t_max = {}",
            budget + delta_t,
            model.config.t_max
        )));
    }
    let table = model.loss_table();
    if table.entries().get(eps_cond.table_index) != Some(&eps_cond.value) {
        return Err(KarlError::Input(format!("{eps_cond:?} is not a loss-table entry")));
    }
    let target = Target::new(base, image)?;
    let mut g = Graph::new();
    let full = budget + delta_t;
    let p = run_phase(
        &mut g,
        model,
        base,
        &target,
        full,
        budget,
        eps_cond.table_index,
        stage,
        weights,
        Some((budget, delta_t)),
    );
    Ok(bundle(&g, &p, weights, true))
}

/// What one image contributed to one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub image_id: String,
    pub t: usize,
    pub delta_t: usize,
    pub eps0: f64,
    pub eps_cond: EpsilonCondition,
    pub eic: LossBundle,
    pub ltc: LossBundle,
    #[serde(skip)]
    pub labels: Vec<u8>,
}

impl IterationRecord {
    /// The curriculum never asks for a lower error than phase 1 reached when
    /// extra tokens are available.
    pub fn is_sound(&self) -> bool {
        self.delta_t == 0 || self.eps_cond.value >= self.eps0
    }
}

/// One image's `L_EIC + L_LTC` on a fresh graph. Returns the graph, the
/// total loss node and the record. `fixed_cond` overrides the condition
/// (used by gradient checks where the ε draw must not vary). `curve` holds
/// the last phase-1 error of this image per budget-grid entry (`NaN` if
/// unseen) and enables minimal-keep labelling.
#[allow(clippy::too_many_arguments)]
pub(crate) fn image_iteration<R: Rng>(
    model: &KarlModel,
    base: &BaseTokenizer,
    target: &Target,
    budget: usize,
    stage: Stage,
    weights: LossWeights,
    rng: &mut R,
    fixed_cond: Option<EpsilonCondition>,
    curve: Option<&[f64]>,
) -> Result<(Graph, Var, IterationRecord, Vec<usize>, Vec<Array2<f64>>)> {
    let t_max = model.config.t_max;
    let table = model.loss_table();
    let mut g = Graph::new();

    let eic = run_phase(&mut g, model, base, target, budget, budget, 0, stage, weights, None);
    let eps0 = achieved_error(model, base, target, &eic.decoded)?;

    let mut delta_t = t_max - budget;
    let eps_cond = match fixed_cond {
        Some(c) => c,
        None if delta_t == 0 => match table.count_below(eps0) {
            0 => table.discretize(eps0),
            n => table.condition(rng.random_range(0..n)),
        },
        None => table.discretize(eps0),
    };
    // eps0 beyond the largest table entry: the target is out of reach at
    // this budget, so every slot is supervised as kept.
    let decoded = if delta_t > 0 && eps_cond.value < eps0 {
        delta_t = 0;
        t_max
    } else {
        budget
    };
    // minimal_keep only moves the halting labels; the decode above is unchanged
    let keep = match curve {
        // eps_cond >= eps0 here, so the sampled budget itself qualifies
        Some(curve) if delta_t > 0 => {
            shortest_sufficient_prefix(&model.config.budget_grid, curve, budget, eps0, eps_cond.value).unwrap_or(budget)
        }
        _ => decoded,
    };
    delta_t = t_max - keep;
    let ltc = run_phase(
        &mut g,
        model,
        base,
        target,
        t_max,
        decoded,
        eps_cond.table_index,
        stage,
        weights,
        Some((keep, delta_t)),
    );
    let mut total = g.add(eic.total, ltc.total);
    if let (Some(curve), true) = (curve, weights.dense_halting > 0.0) {
        let dense = dense_halting_loss(&mut g, model, target, curve, budget, eps0, rng);
        let w = g.scale(dense, weights.dense_halting);
        total = g.add(total, w);
    }
    let record = IterationRecord {
        iteration: 0,
        stage,
        image_id: target.image.id.clone(),
        t: budget,
        delta_t,
        eps0,
        eps_cond,
        eic: bundle(&g, &eic, weights, false),
        ltc: bundle(&g, &ltc, weights, true),
        labels: halting_labels(keep, delta_t),
    };
    let mut usage = eic.code_usage;
    usage.extend(ltc.code_usage);
    let projected: Vec<_> = eic.projected.into_iter().chain(ltc.projected).collect();
    Ok((g, total, record, usage, projected))
}

/// Smallest grid budget whose recorded error meets `eps`, using the fresh
/// `eps0` at `budget`. Unseen budgets (NaN) never qualify.
pub fn shortest_sufficient_prefix(grid: &[usize], curve: &[f64], budget: usize, eps0: f64, eps: f64) -> Option<usize> {
    grid.iter()
        .zip(curve)
        .find(|(&t, &e)| if t == budget { eps0 <= eps } else { e <= eps })
        .map(|(&t, _)| t)
}

/// Halting loss at one uniformly drawn table condition, on the slot states
/// of a separate forward-only encoding under that same condition. The label
/// is the shortest grid prefix whose recorded error meets the condition, or
/// every slot when none does. Never reaches the encoder.
fn dense_halting_loss<R: Rng>(
    g: &mut Graph,
    model: &KarlModel,
    target: &Target,
    curve: &[f64],
    budget: usize,
    eps0: f64,
    rng: &mut R,
) -> Var {
    let grid = &model.config.budget_grid;
    let t_max = model.config.t_max;
    let table = model.loss_table();
    let j = rng.random_range(0..table.len());
    let eps = table.condition(j).value;
    let keep = shortest_sufficient_prefix(grid, curve, budget, eps0, eps).unwrap_or(t_max);
    let mut fwd = Graph::new();
    let enc = model.encode_graph(&mut fwd, &target.grid.tokens, t_max, j);
    let states = g.constant(fwd.value(enc.states).clone());
    let omega = model.halting_graph(g, states, j);
    halting_loss_graph(g, omega, keep, t_max - keep)
}

/// `L_EIC + L_LTC` for one image at a fixed budget and condition, on a
/// fresh graph, for gradient inspection.
#[allow(clippy::too_many_arguments)]
pub fn iteration_loss(
    model: &KarlModel,
    base: &BaseTokenizer,
    target: &Target,
    budget: usize,
    eps_cond: EpsilonCondition,
    stage: Stage,
    weights: LossWeights,
) -> Result<(Graph, Var, IterationRecord)> {
    model.check_budget(budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (g, total, record, _, _) = image_iteration(
        model,
        base,
        target,
        budget,
        stage,
        weights,
        &mut rng,
        Some(eps_cond),
        None,
    )?;
    Ok((g, total, record))
}

/// Mutable training state: model, optimizer, sampler and codebook usage.
pub struct Trainer<'a> {
    pub model: KarlModel,
    pub base: &'a BaseTokenizer,
    pub config: TrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
    total_iters: usize,
    code_hits: Vec<u64>,
    recent: Vec<Array2<f64>>,
    curves: HashMap<String, Vec<f64>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: KarlModel, base: &'a BaseTokenizer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if base.config != model.base {
            return Err(KarlError::Config(
                "model and base tokenizer disagree on geometry".into(),
            ));
        }
        let opt = Adam::new(
            &model.store,
            AdamConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                clip_norm: config.clip_norm,
                ..Default::default()
            },
        );
        let k = model.codebook().map_or(0, |c| c.nrows());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba5e),
            total_iters: (config.stage1_iters + config.stage2_iters).max(1),
            model,
            base,
            config,
            opt,
            iteration: 0,
            code_hits: vec![0; k],
            recent: Vec::new(),
            curves: HashMap::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn lr_scale(&self) -> f64 {
        let it = self.iteration as f64;
        let warm = self.config.warmup_iters as f64;
        if it < warm {
            (it + 1.0) / warm
        } else {
            cosine_scale((it - warm) / (self.total_iters as f64 - warm).max(1.0))
        }
    }

    /// One optimizer step on the batch-mean of `L_EIC + L_LTC`.
    pub fn train_iteration(&mut self, batch: &[Target], stage: Stage) -> Result<Vec<IterationRecord>> {
        if batch.is_empty() {
            return Err(KarlError::Input("train_iteration: empty batch".into()));
        }
        let weights = LossWeights::from(&self.config);
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Array2<f64>> = self
            .model
            .store
            .iter()
            .map(|(_, _, a)| Array2::zeros(a.dim()))
            .collect();
        let mut records = Vec::with_capacity(batch.len());
        for target in batch {
            let budget = sample_budget(&mut self.rng, &self.model.config.budget_grid)?;
            let grid = &self.model.config.budget_grid;
            let curve = self.config.minimal_keep.then(|| {
                self.curves
                    .entry(target.image.id.clone())
                    .or_insert_with(|| vec![f64::NAN; grid.len()])
            });
            let (g, total, mut record, usage, projected) = image_iteration(
                &self.model,
                self.base,
                target,
                budget,
                stage,
                weights,
                &mut self.rng,
                None,
                curve.as_deref().map(|c| c.as_slice()),
            )?;
            if let (Some(c), Some(i)) = (curve, grid.iter().position(|&t| t == budget)) {
                c[i] = record.eps0;
            }
            if !g.scalar(total).is_finite() {
                return Err(KarlError::Input(format!(
                    "non-finite loss at iteration {} on {}",
                    self.iteration, target.image.id
                )));
            }
            let image_grads = g.backward(total).for_store(&g, &self.model.store);
            for (acc, gr) in grads.iter_mut().zip(image_grads) {
                acc.scaled_add(scale, &gr);
            }
            for i in usage {
                self.code_hits[i] += 1;
            }
            self.recent.extend(projected);
            record.iteration = self.iteration;
            records.push(record);
        }
        let lr_scale = self.lr_scale();
        self.opt.step(&mut self.model.store, &grads, lr_scale);
        self.iteration += 1;
        let every = self.config.codebook_restart_every;
        if every > 0 && self.iteration.is_multiple_of(every) {
            self.restart_dead_codes();
        }
        Ok(records)
    }

    /// Re-seeds codes unused since the last restart from recently projected
    /// encoder outputs.
    fn restart_dead_codes(&mut self) {
        let Some(id) = self.model.codebook_id() else { return };
        let pool: Vec<_> = self.recent.drain(..).collect();
        let n = self.code_hits.len();
        let hits = std::mem::replace(&mut self.code_hits, vec![0; n]);
        if pool.is_empty() {
            return;
        }
        let rows: Vec<_> = pool
            .iter()
            .flat_map(|p| p.rows().into_iter().map(|r| r.to_owned()))
            .collect();
        let codes = self.model.store.get_mut(id);
        let mut restarted = 0;
        for (k, &h) in hits.iter().enumerate() {
            if h == 0 {
                let src = &rows[self.rng.random_range(0..rows.len())];
                let mut row = codes.row_mut(k);
                for (c, &s) in row.iter_mut().zip(src.iter()) {
                    *c = s + 0.01 * (self.rng.random::<f64>() - 0.5);
                }
                restarted += 1;
            }
        }
        log::debug!("iteration {}: restarted {restarted} dead codes", self.iteration);
    }
}

/// Summary returned by [`train`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub first_total: f64,
    pub last_total: f64,
    pub curriculum_violations: usize,
    pub stage1_val_l1: Option<f64>,
    pub stage2_val_l1: Option<f64>,
}

#[derive(Serialize)]
struct IterationLine<'r> {
    kind: &'static str,
    iteration: usize,
    stage: Stage,
    records: &'r [IterationRecord],
}

#[derive(Serialize)]
struct EpochLine {
    kind: &'static str,
    epoch: usize,
    stage: Stage,
    iteration: usize,
    mean_total: f64,
    /// Budget → counts of `eps0` per loss-table bin (after rounding up).
    eps0_histogram: std::collections::BTreeMap<usize, Vec<usize>>,
}

#[derive(Serialize)]
struct StageLine {
    kind: &'static str,
    stage: Stage,
    val_pixel_l1: f64,
}

/// Runs the token-space stage then the pixel-ℓ1 stage. Writes one JSON line
/// per iteration and one per epoch to `log`. `on_record` sees every record.
pub fn train(
    model: KarlModel,
    base: &BaseTokenizer,
    train_set: &[Image],
    val_set: &[Image],
    config: &TrainConfig,
    log: &mut dyn Write,
    mut on_record: impl FnMut(&IterationRecord),
) -> Result<(KarlModel, TrainReport)> {
    if train_set.is_empty() {
        return Err(KarlError::Input("train: empty dataset".into()));
    }
    let targets: Vec<Target> = train_set.iter().map(|i| Target::new(base, i)).collect::<Result<_>>()?;
    let mut trainer = Trainer::new(model, base, config.clone())?;
    let table = trainer.model.loss_table();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    let mut epoch = 0;
    let mut epoch_totals = Vec::new();
    let mut hist: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    let batch = config.batch_size.min(targets.len());

    for (stage, iters) in [
        (Stage::TokenSpace, config.stage1_iters),
        (Stage::Pixel, config.stage2_iters),
    ] {
        for _ in 0..iters {
            if order.len() < batch {
                if !epoch_totals.is_empty() {
                    write_epoch(log, epoch, stage, trainer.iteration(), &epoch_totals, &hist)?;
                    epoch += 1;
                    epoch_totals.clear();
                    hist.clear();
                }
                let mut fresh: Vec<usize> = (0..targets.len()).collect();
                fresh.shuffle(&mut order_rng);
                order.extend(fresh);
            }
            let picked: Vec<Target> = order.drain(..batch).map(|i| targets[i].clone()).collect();
            let records = trainer.train_iteration(&picked, stage)?;
            let total: f64 = records.iter().map(|r| r.eic.total + r.ltc.total).sum::<f64>() / records.len() as f64;
            if report.iterations == 0 {
                report.first_total = total;
            }
            report.last_total = total;
            report.iterations += 1;
            epoch_totals.push(total);
            for r in &records {
                if !r.is_sound() {
                    report.curriculum_violations += 1;
                }
                let bins = hist.entry(r.t).or_insert_with(|| vec![0; table.len()]);
                bins[table.discretize(r.eps0).table_index] += 1;
                on_record(r);
            }
            if config.log_every > 0 && trainer.iteration() % config.log_every == 0 {
                let line = IterationLine {
                    kind: "iteration",
                    iteration: trainer.iteration() - 1,
                    stage,
                    records: &records,
                };
                writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| KarlError::io("<metrics log>", e))?;
            }
        }
        if iters > 0 {
            if !epoch_totals.is_empty() {
                write_epoch(log, epoch, stage, trainer.iteration(), &epoch_totals, &hist)?;
                epoch += 1;
                epoch_totals.clear();
                hist.clear();
            }
            if !val_set.is_empty() {
                let l1 = validation_l1(&trainer.model, base, val_set)?;
                match stage {
                    Stage::TokenSpace => report.stage1_val_l1 = Some(l1),
                    Stage::Pixel => report.stage2_val_l1 = Some(l1),
                }
                let line = StageLine {
                    kind: "stage_end",
                    stage,
                    val_pixel_l1: l1,
                };
                writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| KarlError::io("<metrics log>", e))?;
            }
        }
    }
    Ok((trainer.model, report))
}

fn write_epoch(
    log: &mut dyn Write,
    epoch: usize,
    stage: Stage,
    iteration: usize,
    totals: &[f64],
    hist: &std::collections::BTreeMap<usize, Vec<usize>>,
) -> Result<()> {
    let line = EpochLine {
        kind: "epoch",
        epoch,
        stage,
        iteration,
        mean_total: totals.iter().sum::<f64>() / totals.len() as f64,
        eps0_histogram: hist.clone(),
    };
    writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| KarlError::io("<metrics log>", e))
}

/// Mean pixel ℓ1 with all `T_max` tokens active under ε = 0.
pub fn validation_l1(model: &KarlModel, base: &BaseTokenizer, val: &[Image]) -> Result<f64> {
    let reports = crate::metrics::eval_fixed_tokens(model, base, val, &[model.config.t_max])?;
    Ok(reports[0].1.l1_x10 / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_rounds_up_and_clamps() {
        let t = LossTable::default();
        assert_eq!(t.discretize(0.041).value, 0.05);
        assert_eq!(t.discretize(0.0).value, 0.0);
        assert_eq!(t.discretize(0.05).value, 0.05);
        assert_eq!(t.discretize(0.55), t.max());
        assert_eq!(t.max().value, 0.4);
        let c = t.discretize(0.1);
        assert_eq!((c.value, c.table_index), (0.11, 7));
    }

    #[test]
    fn loss_table_validation() {
        assert!(LossTable::new(vec![0.0, 0.1, 0.1]).is_err());
        assert!(LossTable::new(vec![0.01, 0.1]).is_err());
        assert!(LossTable::new(vec![]).is_err());
        assert_eq!(LossTable::default().count_below(0.045), 4);
    }

    #[test]
    fn halting_loss_reference_values() {
        assert!(halting_loss(&[0.0, 0.0, 1.0, 1.0], 2, 2).unwrap() <= 1e-5);
        for (t, dt) in [(1, 0), (3, 5), (0, 4)] {
            let l = halting_loss(&vec![0.5; t + dt], t, dt).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        }
        assert!(halting_loss(&[0.5; 3], 2, 2).is_err());
    }

    #[test]
    fn halting_loss_graph_matches_scalar_version() {
        let omega = [0.9, 0.1, 0.8, 0.2, 0.0, 1.0];
        let mut g = Graph::new();
        let w = g.constant(Array2::from_shape_vec((6, 1), omega.to_vec()).unwrap());
        let l = halting_loss_graph(&mut g, w, 3, 3);
        assert!((g.scalar(l) - halting_loss(&omega, 3, 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn labels_are_keep_then_halt() {
        assert_eq!(halting_labels(2, 3), vec![0, 0, 1, 1, 1]);
        assert_eq!(halting_labels(4, 0), vec![0; 4]);
    }

    #[test]
    fn sample_budget_is_seeded() {
        let grid = [16, 32, 48];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_budget(&mut rng, &grid).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..50).all(|_| sample_budget(&mut rng, &[16]).unwrap() == 16));
        assert!(sample_budget(&mut rng, &[]).is_err());
    }

    #[test]
    fn shortest_prefix_prefers_the_fresh_error_at_the_sampled_budget() {
        let grid = [2, 4, 6];
        let curve = [f64::NAN, 0.02, 0.5];
        assert_eq!(shortest_sufficient_prefix(&grid, &curve, 6, 0.01, 0.03), Some(4));
        assert_eq!(shortest_sufficient_prefix(&grid, &curve, 4, 0.2, 0.03), None);
        assert_eq!(shortest_sufficient_prefix(&grid, &curve, 2, 0.01, 0.01), Some(2));
        assert_eq!(shortest_sufficient_prefix(&grid, &curve, 6, 0.01, 0.0), None);
    }

    #[test]
    fn minimal_keep_labels_the_shortest_sufficient_prefix() {
        use crate::config::{BaseConfig, ModelConfig};
        use crate::data::{make_synthetic, DatasetSpec, Family, Split};
        let bc = BaseConfig {
            image_size: 8,
            patch_size: 4,
            base_dim: 6,
            base_hidden: 10,
            ..BaseConfig::default()
        };
        let mc = ModelConfig {
            enc_width: 8,
            enc_depth: 1,
            dec_width: 8,
            dec_depth: 1,
            t_max: 4,
            budget_grid: vec![1, 2, 3, 4],
            codebook_size: 8,
            code_dim: 3,
            loss_table: vec![0.0, 0.05, 1.0],
            halt_hidden: 4,
            ..ModelConfig::default()
        };
        let base = BaseTokenizer::new(bc.clone(), 1).unwrap();
        let model = KarlModel::new(mc, bc, 2).unwrap();
        let spec = DatasetSpec::synthetic(Split::Val, 8, 3, 1, 3);
        let image = make_synthetic(Family::Constant, &spec, &Default::default()).remove(0);
        let target = Target::new(&base, &image).unwrap();
        let w = LossWeights {
            beta: 0.25,
            lambda: 1.0,
            dense_halting: 0.0,
        };
        let loose = model.loss_table().condition(2);
        let labels = |curve: Option<&[f64]>| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            image_iteration(
                &model,
                &base,
                &target,
                3,
                Stage::TokenSpace,
                w,
                &mut rng,
                Some(loose),
                curve,
            )
            .unwrap()
            .2
            .labels
        };
        assert_eq!(labels(None), vec![0, 0, 0, 1]);
        // unseen budgets are skipped; the first cached error under the condition wins
        assert_eq!(labels(Some(&[f64::NAN, 0.3, 0.2, 0.1])), vec![0, 0, 1, 1]);
        // nothing shorter than the sampled budget qualifies
        assert_eq!(labels(Some(&[2.0, 2.0, 0.0, 0.0])), vec![0, 0, 0, 1]);
    }
}
