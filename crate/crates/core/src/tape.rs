//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every node; [`Gradients::for_store`] then collects
//! the gradients of the leaves bound to a particular [`ParamStore`].
//!
//! Everything is 2-D. Vectors are `1 × n` or `n × 1`, scalars are `1 × 1`.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, Vec<usize>, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// An evaluation record. Values are computed eagerly as nodes are added.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A leaf that receives no gradient bookkeeping beyond its own node.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter from `store`. Repeated binds of the same parameter
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.bound.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a[n, m] + row[1, m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// `a[n, m] * row[1, m]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv_std.push(r);
        }
        self.push(value, Op::LayerNorm(a, inv_std))
    }

    /// Scales every row to unit ℓ2 norm (`eps` guards zero rows).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let mut inv_norm = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let r = 1.0 / (row.dot(&row) + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv_norm.push(r);
        }
        self.push(value, Op::L2Normalize(a, inv_norm))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    /// Repeats a `1 × m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        debug_assert_eq!(row.nrows(), 1);
        let value = row.broadcast((n, row.ncols())).expect("broadcast_rows").to_owned();
        self.push(value, Op::BroadcastRows(a))
    }

    /// Forward value `value`, backward identity into `input`.
    pub fn straight_through(&mut self, input: Var, value: Array2<f64>) -> Var {
        debug_assert_eq!(self.shape(input), value.dim());
        self.push(value, Op::StraightThrough(input))
    }

    /// Cuts the gradient path: a fresh leaf holding the same value.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Mean softmax cross-entropy of `logits[n, k]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        debug_assert_eq!(x.nrows(), targets.len());
        let mut probs = x.clone();
        let mut total = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            total -= (row[t] / sum).ln();
            row /= sum;
        }
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.push(value, Op::CrossEntropy(logits, targets.to_vec(), probs))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean(ad)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Affine(a, scale) => accumulate(&mut grads, *a, g * *scale),
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        let inner = GELU_C * (x + GELU_A * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gv *= d;
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        *gv *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv /= x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x < *lo || x > *hi {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut ga = g;
                    for ((mut grow, yrow), &r) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std.iter()) {
                        let sum_g = grow.sum();
                        let sum_gy: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| {
                            *gv = r / n * (n * *gv - sum_g - yv * sum_gy);
                        });
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2Normalize(a, inv_norm) => {
                    let y = &node.value;
                    let mut ga = g;
                    for ((mut grow, yrow), &r) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_norm.iter()) {
                        let gy = grow.dot(&yrow);
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = r * (*gv - yv * gy));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let gp = g.slice(s![start..start + rows, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        let gp = g.slice(s![.., start..start + cols]).to_owned();
                        accumulate(&mut grads, p, gp);
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let rows = g.nrows();
                    ga.slice_mut(s![*start..*start + rows, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let cols = g.ncols();
                    ga.slice_mut(s![.., *start..*start + cols]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::StraightThrough(a) => accumulate(&mut grads, *a, g),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = Array2::from_elem((r, c), g[[0, 0]] / (r * c) as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut ga = probs.clone();
                    for (mut row, &t) in ga.rows_mut().into_iter().zip(targets) {
                        row[t] -= 1.0;
                    }
                    ga *= scale;
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. the leaf `v`; `None` if `v` does not influence the
    /// loss. Interior gradients are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all parameters of `store` bound into `graph`, indexed by
    /// parameter. Unused parameters get zeros.
    pub fn for_store(&self, graph: &Graph, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = store.iter().map(|(_, _, a)| Array2::zeros(a.dim())).collect();
        for (&(uid, idx), &v) in &graph.bound {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = self.get(v) {
                out[idx] += g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(x0: &Array2<f64>, f: impl Fn(&mut Graph, Var) -> Var) -> (Array2<f64>, Array2<f64>) {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = f(&mut g, x);
        let analytic = g.backward(y).get(x).cloned().unwrap();
        let h = 1e-6;
        let mut numeric = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let y = f(&mut g, x);
                g.scalar(y)
            };
            numeric[[r, c]] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        (analytic, numeric)
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs().max(y.abs())), "{a:?}\n{b:?}");
        }
    }

    fn input() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let cases: Vec<Box<dyn Fn(&mut Graph, Var) -> Var>> = vec![
            Box::new(|g, x| {
                let y = g.gelu(x);
                g.sum(y)
            }),
            Box::new(|g, x| {
                let y = g.sigmoid(x);
                let y = g.mul(y, y);
                g.mean(y)
            }),
            Box::new(|g, x| {
                let y = g.softmax_rows(x);
                let w = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
                let y = g.mul(y, w);
                g.sum(y)
            }),
            Box::new(|g, x| {
                let y = g.layer_norm(x, 1e-5);
                let w = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
                let y = g.mul(y, w);
                g.sum(y)
            }),
            Box::new(|g, x| {
                let y = g.l2_normalize_rows(x, 1e-12);
                let w = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
                let y = g.mul(y, w);
                g.sum(y)
            }),
            Box::new(|g, x| {
                let t = g.transpose(x);
                let y = g.matmul(x, t);
                let y = g.abs(y);
                g.sum(y)
            }),
            Box::new(|g, x| g.cross_entropy(x, &[2, 0])),
            Box::new(|g, x| {
                let a = g.slice_rows(x, 1, 2);
                let b = g.slice_cols(x, 0, 2);
                let b = g.gather_rows(b, &[1, 0, 1]);
                let r = g.broadcast_rows(a, 2);
                let c = g.concat_rows(&[x, r]);
                let s1 = g.sum(c);
                let s2 = g.mean(b);
                let both = g.concat_cols(&[s1, s2]);
                let y = g.affine(both, 2.0, 1.0);
                let y = g.mul(y, y);
                g.sum(y)
            }),
            Box::new(|g, x| {
                let row = g.slice_rows(x, 0, 1);
                let y = g.mul_row(x, row);
                let y = g.add_row(y, row);
                let y = g.sigmoid(y);
                let y = g.ln(y);
                g.sum(y)
            }),
        ];
        for f in cases {
            let (a, n) = numeric_grad(&input(), f);
            assert_close(&a, &n);
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::new();
        let x = g.constant(input());
        let q = g.straight_through(x, Array2::zeros((2, 3)));
        let w = g.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let y = g.mul(q, w);
        let y = g.sum(y);
        assert_eq!(g.scalar(y), 0.0);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.constant(array![[-1.0, 0.5, 2.0]]);
        let y = g.clamp(x, 0.0, 1.0);
        let y = g.sum(y);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn detach_cuts_the_path_to_the_source() {
        let mut g = Graph::new();
        let x = g.constant(input());
        let d = g.detach(x);
        let y = g.mul(x, d);
        let y = g.sum(y);
        let grads = g.backward(y);
        assert!(grads.get(d).is_some());
        assert_close(grads.get(x).unwrap(), &input());
    }
}
