//! Layers shared by the base tokenizer and the KARL encoder/decoder.

use ndarray::Array2;
use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Graph, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let w = store.normal(format!("{name}.w"), fan_in, fan_out, std, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), 1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), 1, dim),
            shift: store.zeros(format!("{name}.shift"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Pre-norm transformer block with full (unmasked) self-attention.
#[derive(Clone, Debug)]
pub struct Block {
    heads: usize,
    ln_attn: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        Self {
            heads,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, false, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, true, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, mlp_ratio * width, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * width, width, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let width = g.shape(x).1;
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let h = self.ln_attn.forward(g, store, x);
        let qkv = self.qkv.forward(g, store, h);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let off = head * head_dim;
            let q = g.slice_cols(qkv, off, off + head_dim);
            let k = g.slice_cols(qkv, width + off, width + off + head_dim);
            let v = g.slice_cols(qkv, 2 * width + off, 2 * width + off + head_dim);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, v));
        }
        let heads = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let a = self.proj.forward(g, store, heads);
        let x = g.add(x, a);

        let h = self.ln_mlp.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }
}

/// A stack of [`Block`]s followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

impl Transformer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), width, heads, mlp_ratio, rng))
            .collect();
        Self {
            blocks,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), width),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        for block in &self.blocks {
            x = block.forward(g, store, x);
        }
        self.ln_out.forward(g, store, x)
    }
}

/// Fixed 2-D sine-cosine embedding for a `side × side` raster grid: the
/// first half of the columns encodes the row, the second half the column.
/// `width` must be a multiple of 4.
pub fn sincos_2d(side: usize, width: usize) -> Array2<f64> {
    assert!(width.is_multiple_of(4), "sincos width {width} must be a multiple of 4");
    let quarter = width / 4;
    Array2::from_shape_fn((side * side, width), |(p, j)| {
        let coord = if j < width / 2 { p / side } else { p % side } as f64;
        let k = (j % (width / 2)) % quarter;
        let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
        if (j % (width / 2)) < quarter {
            (coord * freq).sin()
        } else {
            (coord * freq).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 8, 2, 2, &mut rng);
        let x0 = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let perm = [2usize, 0, 1];

        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = block.forward(&mut g, &store, x);
        let y = g.value(y).clone();

        let mut g = Graph::new();
        let x = g.constant(x0.select(ndarray::Axis(0), &perm));
        let yp = block.forward(&mut g, &store, x);
        let yp = g.value(yp).clone();

        for (k, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp[[k, j]] - y[[p, j]]).abs() < 1e-12);
            }
        }
    }
}
