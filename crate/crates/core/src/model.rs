//! The 1-D latent-distillation tokenizer.
//!
//! The encoder runs full self-attention over
//! `[2-D grid tokens ∥ 1-D slots ∥ ε token]` and returns the slot states plus
//! a halting probability per slot. The decoder runs full self-attention over
//! `[active 1-D tokens ∥ masked grid slate]` and predicts the 2-D grid from
//! the slate positions. Halted tokens are removed before the decoder, so
//! they cannot influence its output.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::base::{nearest_codes, BaseTokenizer, Grid2D};
use crate::config::{BaseConfig, ModelConfig, TokenMode};
use crate::error::{KarlError, Result};
use crate::image::Image;
use crate::nn::{sincos_2d, Linear, Transformer};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::training::{EpsilonCondition, LossTable};

const CODE_NORM_EPS: f64 = 1e-12;

/// Ordered 1-D latent tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `t × D1`.
    pub tokens: Array2<f64>,
    /// Slot index of each row in the encoder's output order.
    pub slots: Vec<usize>,
    /// Encoder budget the tokens came from.
    pub budget: usize,
    pub quantized: bool,
    pub code_indices: Option<Vec<usize>>,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Per-token halting probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltingVector {
    pub omega: Vec<f64>,
}

/// Counts of encoder and decoder invocations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Passes {
    pub encoder: usize,
    pub decoder: usize,
}

#[derive(Clone, Debug)]
struct Quantizer {
    proj_in: Linear,
    codes: ParamId,
    proj_out: Linear,
}

/// Graph handles produced by [`KarlModel::encode_graph`].
pub struct EncodeOut {
    pub z: Var,
    pub omega: Var,
    /// Slot states as seen by the halting head.
    pub states: Var,
}

/// Graph handles produced by [`KarlModel::quantize_graph`].
pub struct QuantOut {
    pub z: Var,
    pub loss: Var,
    pub indices: Vec<usize>,
    /// Projected (pre-snap) vectors, for codebook restarts.
    pub projected: Array2<f64>,
}

#[derive(Debug)]
pub struct KarlModel {
    pub config: ModelConfig,
    pub base: BaseConfig,
    pub store: ParamStore,
    enc_in: Linear,
    enc_pos: ParamId,
    init_tokens: ParamId,
    eps_embed: ParamId,
    encoder: Transformer,
    halt_hidden: Option<(Linear, ParamId)>,
    halt_head: Linear,
    quant: Option<Quantizer>,
    bottleneck: Option<(Linear, Linear)>,
    dec_in: Linear,
    dec_pos: ParamId,
    latent_pos: ParamId,
    mask_token: ParamId,
    decoder: Transformer,
    dec_out: Linear,
    encoder_calls: AtomicUsize,
    decoder_calls: AtomicUsize,
}

impl Clone for KarlModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            base: self.base.clone(),
            store: self.store.clone(),
            enc_in: self.enc_in.clone(),
            enc_pos: self.enc_pos,
            init_tokens: self.init_tokens,
            eps_embed: self.eps_embed,
            encoder: self.encoder.clone(),
            halt_hidden: self.halt_hidden.clone(),
            halt_head: self.halt_head.clone(),
            quant: self.quant.clone(),
            bottleneck: self.bottleneck.clone(),
            dec_in: self.dec_in.clone(),
            dec_pos: self.dec_pos,
            latent_pos: self.latent_pos,
            mask_token: self.mask_token,
            decoder: self.decoder.clone(),
            dec_out: self.dec_out.clone(),
            encoder_calls: AtomicUsize::new(0),
            decoder_calls: AtomicUsize::new(0),
        }
    }
}

impl KarlModel {
    pub fn new(config: ModelConfig, base: BaseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        base.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (we, wd) = (config.enc_width, config.dec_width);
        let out_dim = match base.base_mode {
            TokenMode::Continuous => base.base_dim,
            TokenMode::Discrete => base.base_codebook_size,
        };

        let enc_in = Linear::new(&mut s, "enc.in", base.base_dim, we, true, &mut rng);
        let enc_pos = s.add("enc.pos", sincos_2d(base.grid_side(), we));
        let init_tokens = s.normal("enc.init_tokens", config.t_max, we, 1.0, &mut rng);
        let eps_embed = s.normal("enc.eps_embed", config.loss_table.len(), we, 1.0, &mut rng);
        let encoder = Transformer::new(
            &mut s,
            "enc",
            we,
            config.enc_depth,
            config.heads,
            config.mlp_ratio,
            &mut rng,
        );
        let hh = config.halt_hidden;
        let halt_hidden = (hh > 0).then(|| {
            (
                Linear::new(&mut s, "halt.in", we, hh, true, &mut rng),
                s.normal("halt.eps", config.loss_table.len(), hh, 1.0, &mut rng),
            )
        });
        let halt_head = Linear::new(&mut s, "halt", if hh > 0 { hh } else { we }, 1, true, &mut rng);
        let quant = (config.latent_mode == TokenMode::Discrete).then(|| Quantizer {
            proj_in: Linear::new(&mut s, "quant.in", we, config.code_dim, true, &mut rng),
            codes: s.normal("quant.codes", config.codebook_size, config.code_dim, 1.0, &mut rng),
            proj_out: Linear::new(&mut s, "quant.out", config.code_dim, we, true, &mut rng),
        });
        let bottleneck = (config.latent_mode == TokenMode::Continuous && config.code_dim > 0).then(|| {
            (
                Linear::new(&mut s, "enc.bottleneck.in", we, config.code_dim, true, &mut rng),
                Linear::new(&mut s, "enc.bottleneck.out", config.code_dim, we, true, &mut rng),
            )
        });
        let dec_in = Linear::new(&mut s, "dec.in", we, wd, true, &mut rng);
        let dec_pos = s.add("dec.pos", sincos_2d(base.grid_side(), wd));
        let latent_pos = s.normal("dec.latent_pos", config.t_max, wd, 1.0, &mut rng);
        let mask_token = s.normal("dec.mask", 1, wd, 0.5, &mut rng);
        let decoder = Transformer::new(
            &mut s,
            "dec",
            wd,
            config.dec_depth,
            config.heads,
            config.mlp_ratio,
            &mut rng,
        );
        let dec_out = Linear::new(&mut s, "dec.out", wd, out_dim, true, &mut rng);

        Ok(Self {
            config,
            base,
            store: s,
            enc_in,
            enc_pos,
            init_tokens,
            eps_embed,
            encoder,
            halt_hidden,
            halt_head,
            quant,
            bottleneck,
            dec_in,
            dec_pos,
            latent_pos,
            mask_token,
            decoder,
            dec_out,
            encoder_calls: AtomicUsize::new(0),
            decoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn loss_table(&self) -> LossTable {
        LossTable::new(self.config.loss_table.clone()).expect("validated at construction")
    }

    pub fn grid_tokens(&self) -> usize {
        self.base.grid_tokens()
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
    }

    /// Total encoder/decoder invocations through the inference API.
    pub fn passes(&self) -> Passes {
        Passes {
            encoder: self.encoder_calls.load(Ordering::Relaxed),
            decoder: self.decoder_calls.load(Ordering::Relaxed),
        }
    }

    /// Unit-norm code vectors the latent quantizer snaps to.
    pub fn codebook(&self) -> Option<Array2<f64>> {
        self.quant.as_ref().map(|q| {
            let mut c = self.store.get(q.codes).clone();
            for mut row in c.rows_mut() {
                let r = 1.0 / (row.dot(&row) + CODE_NORM_EPS).sqrt();
                row.mapv_inplace(|v| v * r);
            }
            c
        })
    }

    pub(crate) fn codebook_id(&self) -> Option<ParamId> {
        self.quant.as_ref().map(|q| q.codes)
    }

    pub fn check_budget(&self, budget: usize) -> Result<()> {
        if budget == self.config.t_max || self.config.budget_grid.contains(&budget) {
            Ok(())
        } else {
            Err(KarlError::Input(format!(
                "budget {budget} is not in the budget grid {:?}",
                self.config.budget_grid
            )))
        }
    }

    fn check_eps(&self, eps: &EpsilonCondition) -> Result<()> {
        let table = &self.config.loss_table;
        match table.get(eps.table_index) {
            Some(&v) if v == eps.value => Ok(()),
            _ => Err(KarlError::Input(format!(
                "epsilon condition {eps:?} does not match the loss table"
            ))),
        }
    }

    fn check_grid(&self, tokens: &Array2<f64>) -> Result<()> {
        if tokens.dim() != (self.grid_tokens(), self.base.base_dim) {
            return Err(KarlError::Input(format!(
                "grid has shape {:?}, model expects ({}, {})",
                tokens.dim(),
                self.grid_tokens(),
                self.base.base_dim
            )));
        }
        Ok(())
    }

    /// Encoder forward on the tape. The ε token is consumed here and never
    /// appears in the output.
    pub fn encode_graph(&self, g: &mut Graph, grid: &Array2<f64>, budget: usize, eps_index: usize) -> EncodeOut {
        let s = &self.store;
        let n_grid = grid.nrows();
        let x = g.constant(grid.clone());
        let x = self.enc_in.forward(g, s, x);
        let pos = g.param(s, self.enc_pos);
        let x = g.add(x, pos);
        let init = g.param(s, self.init_tokens);
        let slots = g.slice_rows(init, 0, budget);
        let table = g.param(s, self.eps_embed);
        let eps = g.slice_rows(table, eps_index, eps_index + 1);
        let seq = g.concat_rows(&[x, slots, eps]);
        let h = self.encoder.forward(g, s, seq);
        let z = g.slice_rows(h, n_grid, n_grid + budget);
        let states = if self.config.detach_halting { g.detach(z) } else { z };
        let omega = self.halting_graph(g, states, eps_index);
        let z = match &self.bottleneck {
            Some((down, up)) => {
                let narrow = down.forward(g, s, z);
                up.forward(g, s, narrow)
            }
            None => z,
        };
        EncodeOut { z, omega, states }
    }

    /// Halting probabilities for slot `states` under the condition at `eps_index`.
    pub fn halting_graph(&self, g: &mut Graph, states: Var, eps_index: usize) -> Var {
        let s = &self.store;
        let h = match &self.halt_hidden {
            Some((lin, table)) => {
                let h = lin.forward(g, s, states);
                let t = g.param(s, *table);
                let e = g.slice_rows(t, eps_index, eps_index + 1);
                let h = g.add_row(h, e);
                g.gelu(h)
            }
            None => states,
        };
        let logits = self.halt_head.forward(g, s, h);
        g.sigmoid(logits)
    }

    /// Factorized quantization: project to `code_dim`, ℓ2-normalize, snap to
    /// the nearest normalized code, project back. Straight-through into the
    /// projection; the loss is `codebook + commitment`.
    pub fn quantize_graph(&self, g: &mut Graph, z: Var) -> Option<QuantOut> {
        let q = self.quant.as_ref()?;
        let s = &self.store;
        let p = q.proj_in.forward(g, s, z);
        let p = g.l2_normalize_rows(p, CODE_NORM_EPS);
        let codes = g.param(s, q.codes);
        let codes = g.l2_normalize_rows(codes, CODE_NORM_EPS);
        let projected = g.value(p).clone();
        let indices = nearest_codes(&projected, g.value(codes));
        let (snapped, loss) = crate::base::vq_straight_through(g, codes, p);
        let out = q.proj_out.forward(g, s, snapped);
        Some(QuantOut {
            z: out,
            loss,
            indices,
            projected,
        })
    }

    /// Decoder forward on the tape; `active` is `a × D1` holding the tokens
    /// of `slots`, output is `G × out` (embeddings in continuous base mode,
    /// logits in discrete base mode).
    pub fn decode_graph(&self, g: &mut Graph, active: Var, slots: &[usize]) -> Var {
        let s = &self.store;
        let n_active = g.shape(active).0;
        assert_eq!(n_active, slots.len(), "one slot index per active token");
        let a = self.dec_in.forward(g, s, active);
        let table = g.param(s, self.latent_pos);
        let slot_pos = g.gather_rows(table, slots);
        let a = g.add(a, slot_pos);
        let mask = g.param(s, self.mask_token);
        let slate = g.broadcast_rows(mask, self.grid_tokens());
        let pos = g.param(s, self.dec_pos);
        let slate = g.add(slate, pos);
        let seq = g.concat_rows(&[a, slate]);
        let h = self.decoder.forward(g, s, seq);
        let grid = g.slice_rows(h, n_active, n_active + self.grid_tokens());
        self.dec_out.forward(g, s, grid)
    }

    /// Maps a decoder output into base-token space, differentiably. Discrete
    /// base mode mixes codebook rows by softmax weight.
    pub fn grid_to_base_tokens(&self, g: &mut Graph, base: &BaseTokenizer, out: Var) -> Var {
        match base.codebook() {
            None => out,
            Some(codes) => {
                let probs = g.softmax_rows(out);
                let cb = g.constant(codes.clone());
                g.matmul(probs, cb)
            }
        }
    }

    /// Converts a decoder output value into a [`Grid2D`] (argmax in discrete
    /// base mode).
    pub fn output_to_grid(&self, base: &BaseTokenizer, out: &Array2<f64>) -> Grid2D {
        match base.codebook() {
            None => Grid2D {
                tokens: out.clone(),
                code_indices: None,
                mode: TokenMode::Continuous,
            },
            Some(codes) => {
                let idx: Vec<usize> = out.rows().into_iter().map(argmax).collect();
                Grid2D {
                    tokens: codes.select(Axis(0), &idx),
                    code_indices: Some(idx),
                    mode: TokenMode::Discrete,
                }
            }
        }
    }

    pub(crate) fn encode_counted(
        &self,
        grid: &Grid2D,
        budget: usize,
        eps: &EpsilonCondition,
        passes: &mut Passes,
    ) -> Result<(LatentSequence, HaltingVector)> {
        self.check_budget(budget)?;
        self.check_eps(eps)?;
        self.check_grid(&grid.tokens)?;
        let mut g = Graph::new();
        let out = self.encode_graph(&mut g, &grid.tokens, budget, eps.table_index);
        passes.encoder += 1;
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        Ok((
            LatentSequence {
                tokens: g.value(out.z).clone(),
                slots: (0..budget).collect(),
                budget,
                quantized: false,
                code_indices: None,
            },
            HaltingVector {
                omega: g.value(out.omega).iter().copied().collect(),
            },
        ))
    }

    /// Tokens and halting probabilities for `grid` at `budget` under `eps`.
    pub fn encode(
        &self,
        grid: &Grid2D,
        budget: usize,
        eps: &EpsilonCondition,
    ) -> Result<(LatentSequence, HaltingVector)> {
        self.encode_counted(grid, budget, eps, &mut Passes::default())
    }

    /// Snaps `z` to the 1-D codebook. Returns `z` unchanged with zero loss in
    /// continuous latent mode.
    pub fn quantize(&self, z: &LatentSequence) -> Result<(LatentSequence, f64)> {
        if z.is_empty() {
            return Err(KarlError::Input("quantize: empty sequence".into()));
        }
        if z.quantized {
            return Err(KarlError::Input("quantize: sequence is already quantized".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(z.tokens.clone());
        match self.quantize_graph(&mut g, x) {
            None => Ok((z.clone(), 0.0)),
            Some(q) => Ok((
                LatentSequence {
                    tokens: g.value(q.z).clone(),
                    slots: z.slots.clone(),
                    budget: z.budget,
                    quantized: true,
                    code_indices: Some(q.indices),
                },
                g.scalar(q.loss),
            )),
        }
    }

    pub(crate) fn decode_counted(
        &self,
        active: &LatentSequence,
        base: &BaseTokenizer,
        passes: &mut Passes,
    ) -> Result<Grid2D> {
        if active.is_empty() {
            return Err(KarlError::Input("decode: no active tokens".into()));
        }
        if active.tokens.ncols() != self.config.enc_width {
            return Err(KarlError::Input(format!(
                "decode: token width {} != {}",
                active.tokens.ncols(),
                self.config.enc_width
            )));
        }
        if active.slots.len() != active.tokens.nrows() || active.slots.iter().any(|&i| i >= self.config.t_max) {
            return Err(KarlError::Input(format!(
                "decode: slots {:?} do not index {} tokens below t_max {}",
                active.slots,
                active.tokens.nrows(),
                self.config.t_max
            )));
        }
        let mut g = Graph::new();
        let a = g.constant(active.tokens.clone());
        let out = self.decode_graph(&mut g, a, &active.slots);
        passes.decoder += 1;
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.output_to_grid(base, g.value(out)))
    }

    /// Predicts the full `G`-token grid from the active tokens only.
    pub fn decode(&self, active: &LatentSequence, base: &BaseTokenizer) -> Result<Grid2D> {
        self.decode_counted(active, base, &mut Passes::default())
    }

    /// Encode → quantize → select active → decode → decode2d.
    pub fn reconstruct(
        &self,
        base: &BaseTokenizer,
        image: &Image,
        budget: usize,
        eps: f64,
        threshold: f64,
    ) -> Result<(Image, crate::kc::KCEstimate)> {
        let (rec, est, _) = self.reconstruct_counted(base, image, budget, eps, threshold)?;
        Ok((rec, est))
    }

    pub(crate) fn reconstruct_counted(
        &self,
        base: &BaseTokenizer,
        image: &Image,
        budget: usize,
        eps: f64,
        threshold: f64,
    ) -> Result<(Image, crate::kc::KCEstimate, Vec<usize>)> {
        let cond = self.loss_table().discretize(eps.max(0.0));
        let grid = base.encode2d(image)?;
        let mut passes = Passes::default();
        let (z, omega) = self.encode_counted(&grid, budget, &cond, &mut passes)?;
        let z = if self.is_quantized() { self.quantize(&z)?.0 } else { z };
        let active = select_active(&z, &omega, threshold)?;
        let pred = self.decode_counted(&active, base, &mut passes)?;
        let mut rec = base.decode2d(&pred)?;
        rec.id = image.id.clone();
        let err = crate::metrics::pixel_l1(image, &rec)?;
        let est = crate::kc::KCEstimate::new(active.len(), eps, budget, err, passes);
        Ok((rec, est, active.slots))
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Keeps the tokens with `omega < threshold`, in order. If every token
/// halts, keeps the single lowest-`omega` token (first on ties).
pub fn select_active(z: &LatentSequence, omega: &HaltingVector, threshold: f64) -> Result<LatentSequence> {
    if z.len() != omega.omega.len() {
        return Err(KarlError::Input(format!(
            "{} tokens but {} halting probabilities",
            z.len(),
            omega.omega.len()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(KarlError::Input(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut keep: Vec<usize> = (0..z.len()).filter(|&i| omega.omega[i] < threshold).collect();
    if keep.is_empty() && !z.is_empty() {
        let mut best = 0;
        for (i, &w) in omega.omega.iter().enumerate() {
            if w < omega.omega[best] {
                best = i;
            }
        }
        keep.push(best);
    }
    Ok(LatentSequence {
        tokens: z.tokens.select(Axis(0), &keep),
        slots: keep.iter().map(|&i| z.slots[i]).collect(),
        budget: z.budget,
        quantized: z.quantized,
        code_indices: z.code_indices.as_ref().map(|c| keep.iter().map(|&i| c[i]).collect()),
    })
}
