//! Desk-scale stand-in for a pretrained VQGAN/VAE: a per-patch autoencoder
//! mapping an image to a grid of 2-D latent tokens and back.
//!
//! Trained once with [`BaseTokenizer::fit`] and then treated as frozen by
//! everything downstream.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BaseConfig, TokenMode};
use crate::error::{KarlError, Result};
use crate::image::Image;
use crate::nn::Linear;
use crate::params::{Adam, AdamConfig, ParamId, ParamStore};
use crate::tape::{Graph, Var};

/// A grid of `G` base tokens in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub tokens: Array2<f64>,
    pub code_indices: Option<Vec<usize>>,
    pub mode: TokenMode,
}

impl Grid2D {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct BaseTokenizer {
    pub config: BaseConfig,
    pub store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    codebook: Option<ParamId>,
}

/// Per-epoch pixel ℓ1 recorded by [`BaseTokenizer::fit`].
#[derive(Clone, Debug, Default)]
pub struct BaseFitLog {
    pub initial_l1: f64,
    pub epoch_l1: Vec<f64>,
}

impl BaseTokenizer {
    pub fn new(config: BaseConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (pd, h, d) = (config.patch_dim(), config.base_hidden, config.base_dim);
        let enc1 = Linear::new(&mut store, "base.enc1", pd, h, true, &mut rng);
        let enc2 = Linear::new(&mut store, "base.enc2", h, d, true, &mut rng);
        let dec1 = Linear::new(&mut store, "base.dec1", d, h, true, &mut rng);
        let dec2 = Linear::new(&mut store, "base.dec2", h, pd, true, &mut rng);
        let codebook = (config.base_mode == TokenMode::Discrete)
            .then(|| store.normal("base.codebook", config.base_codebook_size, d, 1.0, &mut rng));
        Ok(Self {
            config,
            store,
            enc1,
            enc2,
            dec1,
            dec2,
            codebook,
        })
    }

    pub fn grid_tokens(&self) -> usize {
        self.config.grid_tokens()
    }

    pub fn mode(&self) -> TokenMode {
        self.config.base_mode
    }

    pub fn codebook(&self) -> Option<&Array2<f64>> {
        self.codebook.map(|id| self.store.get(id))
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook().map_or(0, |c| c.nrows())
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        let expected = (c.image_size, c.image_size, c.channels);
        if image.shape() != expected {
            return Err(KarlError::Input(format!(
                "image {} has shape {:?}, tokenizer expects {:?}",
                image.id,
                image.shape(),
                expected
            )));
        }
        Ok(())
    }

    /// Continuous encoder output for a patch matrix, bounded to `(-1, 1)`
    /// so every image family lives on the same token scale.
    pub fn encode_graph(&self, g: &mut Graph, patches: Var) -> Var {
        let h = self.enc1.forward(g, &self.store, patches);
        let h = g.gelu(h);
        let z = self.enc2.forward(g, &self.store, h);
        // tanh(z) = 2·sigmoid(2z) − 1
        let z2 = g.scale(z, 2.0);
        let s = g.sigmoid(z2);
        g.affine(s, 2.0, -1.0)
    }

    /// Patch matrix in `(0, 1)` from a token matrix.
    pub fn decode_graph(&self, g: &mut Graph, tokens: Var) -> Var {
        let h = self.dec1.forward(g, &self.store, tokens);
        let h = g.gelu(h);
        let p = self.dec2.forward(g, &self.store, h);
        g.sigmoid(p)
    }

    pub fn encode2d(&self, image: &Image) -> Result<Grid2D> {
        self.check_image(image)?;
        let patches = image.patchify(self.config.patch_size)?;
        let mut g = Graph::new();
        let x = g.constant(patches);
        let z = self.encode_graph(&mut g, x);
        let z = g.value(z).clone();
        Ok(match self.codebook() {
            None => Grid2D {
                tokens: z,
                code_indices: None,
                mode: TokenMode::Continuous,
            },
            Some(codes) => {
                let idx = nearest_codes(&z, codes);
                Grid2D {
                    tokens: codes.select(Axis(0), &idx),
                    code_indices: Some(idx),
                    mode: TokenMode::Discrete,
                }
            }
        })
    }

    pub fn decode2d(&self, grid: &Grid2D) -> Result<Image> {
        self.decode_tokens("decoded", &grid.tokens)
    }

    /// Decodes a raw `G × D2` token matrix.
    pub fn decode_tokens(&self, id: &str, tokens: &Array2<f64>) -> Result<Image> {
        let c = &self.config;
        if tokens.dim() != (c.grid_tokens(), c.base_dim) {
            return Err(KarlError::Input(format!(
                "grid has shape {:?}, expected ({}, {})",
                tokens.dim(),
                c.grid_tokens(),
                c.base_dim
            )));
        }
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let p = self.decode_graph(&mut g, t);
        Image::unpatchify(id, g.value(p), (c.image_size, c.image_size, c.channels), c.patch_size)
    }

    /// Decodes code indices (discrete mode).
    pub fn decode_indices(&self, id: &str, indices: &[usize]) -> Result<Image> {
        let codes = self
            .codebook()
            .ok_or_else(|| KarlError::Input("decode_indices on a continuous tokenizer".into()))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= codes.nrows()) {
            return Err(KarlError::Input(format!("code index {bad} out of range")));
        }
        self.decode_tokens(id, &codes.select(Axis(0), indices))
    }

    /// Mean pixel ℓ1 of `decode2d(encode2d(x))` over `images`.
    pub fn reconstruction_l1(&self, images: &[Image]) -> Result<f64> {
        let mut total = 0.0;
        for img in images {
            let rec = self.decode2d(&self.encode2d(img)?)?;
            total += crate::metrics::pixel_l1(img, &rec)?;
        }
        Ok(total / images.len().max(1) as f64)
    }

    /// Trains the autoencoder on `dataset` with pixel ℓ1 (plus VQ terms in
    /// discrete mode). Deterministic given `seed`.
    pub fn fit(&mut self, dataset: &[Image], epochs: usize, batch: usize, lr: f64, seed: u64) -> Result<BaseFitLog> {
        if dataset.is_empty() {
            return Err(KarlError::Input("fit_base: empty dataset".into()));
        }
        for img in dataset {
            self.check_image(img)?;
        }
        let patches: Vec<Array2<f64>> = dataset
            .iter()
            .map(|img| img.patchify(self.config.patch_size))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Adam::new(
            &self.store,
            AdamConfig {
                lr,
                ..Default::default()
            },
        );
        let mut log = BaseFitLog {
            initial_l1: self.reconstruction_l1(dataset)?,
            ..Default::default()
        };
        let steps_per_epoch = dataset.len().div_ceil(batch);
        let total_steps = (epochs * steps_per_epoch).max(1);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let views: Vec<_> = chunk.iter().map(|&i| patches[i].view()).collect();
                let x0 = ndarray::concatenate(Axis(0), &views).expect("equal patch dims");
                let mut g = Graph::new();
                let x = g.constant(x0);
                let z = self.encode_graph(&mut g, x);
                let (tokens, vq) = match self.codebook {
                    None => (z, None),
                    Some(cb) => {
                        let cb = g.param(&self.store, cb);
                        let (q, loss) = vq_straight_through(&mut g, cb, z);
                        (q, Some(loss))
                    }
                };
                let rec = self.decode_graph(&mut g, tokens);
                let mut loss = g.l1(rec, x);
                if let Some(vq) = vq {
                    let vq = g.scale(vq, 0.25);
                    loss = g.add(loss, vq);
                }
                let grads = g.backward(loss).for_store(&g, &self.store);
                let progress = opt.steps() as f64 / total_steps as f64;
                opt.step(&mut self.store, &grads, cosine_scale(progress));
            }
            log.epoch_l1.push(self.reconstruction_l1(dataset)?);
        }
        Ok(log)
    }
}

/// Cosine decay from 1 to 0.1 over `progress ∈ [0, 1]`.
pub(crate) fn cosine_scale(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Index of the nearest row of `codes` (squared Euclidean) for every row of
/// `x`. Ties resolve to the lowest index.
pub fn nearest_codes(x: &Array2<f64>, codes: &Array2<f64>) -> Vec<usize> {
    let code_sq: Vec<f64> = codes.rows().into_iter().map(|c| c.dot(&c)).collect();
    let cross = x.dot(&codes.t());
    cross
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, (&xc, &cc)) in row.iter().zip(&code_sq).enumerate() {
                // |x|^2 is constant across codes
                let d = cc - 2.0 * xc;
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Nearest-code snapping with a straight-through estimator. Returns the
/// snapped tokens and `codebook + commitment` loss.
pub(crate) fn vq_straight_through(g: &mut Graph, codebook: Var, z: Var) -> (Var, Var) {
    let idx = nearest_codes(g.value(z), g.value(codebook));
    let e = g.gather_rows(codebook, &idx);
    let z_sg = g.detach(z);
    let e_sg = g.detach(e);
    let codebook_loss = g.mse(z_sg, e);
    let commit_loss = g.mse(z, e_sg);
    let loss = g.add(codebook_loss, commit_loss);
    let snapped = g.value(e).clone();
    let q = g.straight_through(z, snapped);
    (q, loss)
}
