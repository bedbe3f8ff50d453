//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records the forward computation as an append-only list of nodes;
//! [`Tape::backward`] walks the list in reverse and accumulates gradients for
//! every node that transitively depends on a [`Tape::var`] leaf. Frozen
//! parameters enter as [`Tape::constant`] leaves, so no gradient work is spent
//! on them (gradients still flow *through* ops that mix constants and
//! variables).
//!
//! Every value is an `Array2<f64>`; scalars are 1x1 and row vectors 1xN.

use ndarray::{Array2, Axis};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise a + b (same shape).
    Add(NodeId, NodeId),
    /// (m,n) + (1,n), broadcast over rows.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product (same shape).
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a @ b with shapes (m,k) x (k,n).
    MatMul(NodeId, NodeId),
    /// a @ b^T with shapes (m,k) x (n,k).
    MatMulNT(NodeId, NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise softmax on a square matrix with entries j > i masked out.
    CausalSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    /// (m,n) -> (1,n) column means.
    MeanRows(NodeId),
    /// (m,n) -> (1,1) sum of all entries.
    SumAll(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    /// a / s where s is 1x1.
    DivScalar(NodeId, NodeId),
    /// a * s where s is 1x1.
    MulScalar(NodeId, NodeId),
    /// Select rows of `table` by index (duplicates allowed).
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    /// Mean over rows of -log softmax(logits)[target]. Output 1x1.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by `NodeId`.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to node `id`, if it received one.
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn causal_softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    assert_eq!(n, x.ncols(), "causal softmax requires a square matrix");
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            max = max.max(x[[i, j]]);
        }
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (x[[i, j]] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..=i {
            out[[i, j]] /= sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => *g += &delta,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of node `id`.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant (frozen parameters, data).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[a].value + &self.nodes[row].value;
        let rg = self.requires(a) || self.requires(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * k);
        let rg = self.requires(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// a @ b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows_value(&self.nodes[a].value);
        let rg = self.requires(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn causal_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = causal_softmax_rows_value(&self.nodes[a].value);
        let rg = self.requires(a);
        self.push(v, Op::CausalSoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let n = xv.ncols() as f64;
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = g[[0, j]] * ((v - mean) * inv_std) + b[[0, j]];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta }, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(gelu_scalar);
        let rg = self.requires(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0]].value.ncols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let rg = self.requires(x);
        self.push(v, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.nrows();
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.requires(x);
        self.push(v, Op::SliceCols { x, start }, rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let m = av.nrows() as f64;
        let v = av.sum_axis(Axis(0)).insert_axis(Axis(0)) / m;
        let rg = self.requires(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        let rg = self.requires(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        let rg = self.requires(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        let rg = self.requires(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    /// a / s (s is 1x1).
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.nodes[s].value[[0, 0]];
        let v = self.nodes[a].value.mapv(|x| x / sv);
        let rg = self.requires(a) || self.requires(s);
        self.push(v, Op::DivScalar(a, s), rg)
    }

    /// a * s (s is 1x1).
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.nodes[s].value[[0, 0]];
        let v = self.nodes[a].value.mapv(|x| x * sv);
        let rg = self.requires(a) || self.requires(s);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let tv = &self.nodes[table].value;
        let mut v = Array2::zeros((indices.len(), tv.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).assign(&tv.row(ix));
        }
        let rg = self.requires(table);
        self.push(
            v,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Mean cross-entropy over rows: -(1/m) sum_i log softmax(logits_i)[t_i].
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows_value(lv);
        let m = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[[i, t]].ln())
            .sum::<f64>()
            / m;
        let rg = self.requires(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Backpropagate from a 1x1 `loss` node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            self.nodes[loss].value.dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[*b], g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.requires(*row) {
                        let rg = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[*row], rg);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[*b], g.mapv(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], &g * &self.nodes[*b].value);
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[*b], &g * &self.nodes[*a].value);
                    }
                }
                Op::Scale(a, k) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.mapv(|x| x * k));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.dot(&self.nodes[*b].value.t()));
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[*b], self.nodes[*a].value.t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.dot(&self.nodes[*b].value));
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[*b], g.t().dot(&self.nodes[*a].value));
                    }
                }
                Op::SoftmaxRows(a) | Op::CausalSoftmaxRows(a) => {
                    if self.requires(*a) {
                        let p = &self.nodes[id].value;
                        let gp = &g * p;
                        let row_dot = gp.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let da = &gp - &(p * &row_dot);
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gamma].value;
                    let n = xv.ncols();
                    let nf = n as f64;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dgamma = Array2::zeros((1, n));
                    let mut dbeta = Array2::zeros((1, n));
                    for (i, row) in xv.rows().into_iter().enumerate() {
                        let mean = row.sum() / nf;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> =
                            row.iter().map(|v| (v - mean) * inv_std).collect();
                        let ghat: Vec<f64> =
                            (0..n).map(|j| gv[[0, j]] * g[[i, j]]).collect();
                        let mean_ghat = ghat.iter().sum::<f64>() / nf;
                        let mean_ghat_xhat = ghat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / nf;
                        for j in 0..n {
                            dgamma[[0, j]] += g[[i, j]] * xhat[j];
                            dbeta[[0, j]] += g[[i, j]];
                            dx[[i, j]] = (ghat[j] - mean_ghat - xhat[j] * mean_ghat_xhat)
                                * inv_std;
                        }
                    }
                    if self.requires(*x) {
                        accumulate(&mut grads[*x], dx);
                    }
                    if self.requires(*gamma) {
                        accumulate(&mut grads[*gamma], dgamma);
                    }
                    if self.requires(*beta) {
                        accumulate(&mut grads[*beta], dbeta);
                    }
                }
                Op::Gelu(a) => {
                    if self.requires(*a) {
                        let da = self.nodes[*a].value.mapv(gelu_grad_scalar) * &g;
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        if self.requires(p) {
                            let slice = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                            accumulate(&mut grads[p], slice);
                        }
                        at += rows;
                    }
                }
                Op::SliceRows { x, start } => {
                    if self.requires(*x) {
                        let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                        dx.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                            .assign(&g);
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.ncols();
                        if self.requires(p) {
                            let slice = g.slice(ndarray::s![.., at..at + cols]).to_owned();
                            accumulate(&mut grads[p], slice);
                        }
                        at += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.requires(*x) {
                        let mut dx = Array2::zeros(self.nodes[*x].value.raw_dim());
                        dx.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                            .assign(&g);
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::MeanRows(a) => {
                    if self.requires(*a) {
                        let m = self.nodes[*a].value.nrows();
                        let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                        let scaled = g.mapv(|x| x / m as f64);
                        for mut row in da.rows_mut() {
                            row.assign(&scaled.row(0));
                        }
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::SumAll(a) => {
                    if self.requires(*a) {
                        let da = Array2::from_elem(self.nodes[*a].value.raw_dim(), g[[0, 0]]);
                        accumulate(&mut grads[*a], da);
                    }
                }
                Op::Ln(a) => {
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], &g / &self.nodes[*a].value);
                    }
                }
                Op::Sqrt(a) => {
                    if self.requires(*a) {
                        let y = &self.nodes[id].value;
                        accumulate(&mut grads[*a], &g / &y.mapv(|v| 2.0 * v));
                    }
                }
                Op::DivScalar(a, s) => {
                    let sv = self.nodes[*s].value[[0, 0]];
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.mapv(|x| x / sv));
                    }
                    if self.requires(*s) {
                        let y = &self.nodes[id].value;
                        let ds = -(&g * y).sum() / sv;
                        accumulate(&mut grads[*s], Array2::from_elem((1, 1), ds));
                    }
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[*s].value[[0, 0]];
                    if self.requires(*a) {
                        accumulate(&mut grads[*a], g.mapv(|x| x * sv));
                    }
                    if self.requires(*s) {
                        let ds = (&g * &self.nodes[*a].value).sum();
                        accumulate(&mut grads[*s], Array2::from_elem((1, 1), ds));
                    }
                }
                Op::GatherRows { table, indices } => {
                    if self.requires(*table) {
                        let mut dt = Array2::zeros(self.nodes[*table].value.raw_dim());
                        for (i, &ix) in indices.iter().enumerate() {
                            let mut row = dt.row_mut(ix);
                            row += &g.row(i);
                        }
                        accumulate(&mut grads[*table], dt);
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    if self.requires(*logits) {
                        let p = softmax_rows_value(&self.nodes[*logits].value);
                        let m = targets.len() as f64;
                        let scale = g[[0, 0]] / m;
                        let mut dl = p;
                        for (i, &t) in targets.iter().enumerate() {
                            dl[[i, t]] -= 1.0;
                        }
                        accumulate(&mut grads[*logits], dl.mapv(|x| x * scale));
                    }
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite difference of `f` at `x`, one entry at a time.
    fn numeric_grad<F: FnMut(&Array2<f64>) -> f64>(
        x: &Array2<f64>,
        mut f: F,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        let mut xp = x.clone();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = xp[[i, j]];
                xp[[i, j]] = orig + h;
                let fp = f(&xp);
                xp[[i, j]] = orig - h;
                let fm = f(&xp);
                xp[[i, j]] = orig;
                g[[i, j]] = (fp - fm) / (2.0 * h);
            }
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!(
                (x - y).abs() / denom < tol,
                "mismatch: {x} vs {y} (rel {})",
                (x - y).abs() / denom
            );
        }
    }

    /// FD-check a scalar-valued builder against the tape gradient for
    /// every input marked variable.
    fn check<F>(inputs: &[Array2<f64>], build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| t.var(x.clone())).collect();
        let loss = build(&mut t, &ids);
        let grads = t.backward(loss);
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(ids[k]).expect("missing grad").clone();
            let numeric = numeric_grad(
                x,
                |xp| {
                    let mut t2 = Tape::new();
                    let ids2: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(m, v)| t2.var(if m == k { xp.clone() } else { v.clone() }))
                        .collect();
                    let l = build(&mut t2, &ids2);
                    t2.scalar(l)
                },
                1e-5,
            );
            assert_close(&analytic, &numeric, 1e-6);
        }
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        check(&[a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1]);
            let c2 = t.mul(c, c); // make the loss nonlinear
            t.sum_all(c2)
        });
    }

    #[test]
    fn matmul_nt_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 5, 4);
        check(&[a, b], |t, ids| {
            let c = t.matmul_nt(ids[0], ids[1]);
            let c2 = t.mul(c, c);
            t.sum_all(c2)
        });
    }

    #[test]
    fn softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 5);
        let w = rand_mat(&mut rng, 3, 5);
        check(&[a, w], |t, ids| {
            let p = t.softmax_rows(ids[0]);
            let weighted = t.mul(p, ids[1]);
            t.sum_all(weighted)
        });
    }

    #[test]
    fn causal_softmax_grad_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 4, 4);
        let w = rand_mat(&mut rng, 4, 4);
        let mut t = Tape::new();
        let id = t.var(a.clone());
        let p = t.causal_softmax_rows(id);
        let pv = t.value(p);
        for i in 0..4 {
            let row_sum: f64 = (0..4).map(|j| pv[[i, j]]).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert_eq!(pv[[i, j]], 0.0);
            }
        }
        check(&[a, w], |t, ids| {
            let p = t.causal_softmax_rows(ids[0]);
            let weighted = t.mul(p, ids[1]);
            t.sum_all(weighted)
        });
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 3, 6);
        let gamma = rand_mat(&mut rng, 1, 6);
        let beta = rand_mat(&mut rng, 1, 6);
        let w = rand_mat(&mut rng, 3, 6);
        check(&[x, gamma, beta, w], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2]);
            let weighted = t.mul(y, ids[3]);
            t.sum_all(weighted)
        });
    }

    #[test]
    fn gelu_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 3, 4);
        check(&[x], |t, ids| {
            let y = t.gelu(ids[0]);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
    }

    #[test]
    fn concat_slice_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 4, 3);
        check(&[a, b], |t, ids| {
            let c = t.concat_rows(&[ids[0], ids[1]]);
            let s = t.slice_rows(c, 1, 3);
            let s2 = t.mul(s, s);
            t.sum_all(s2)
        });
        let a = rand_mat(&mut rng, 3, 2);
        let b = rand_mat(&mut rng, 3, 4);
        check(&[a, b], |t, ids| {
            let c = t.concat_cols(&[ids[0], ids[1]]);
            let s = t.slice_cols(c, 1, 4);
            let s2 = t.mul(s, s);
            t.sum_all(s2)
        });
    }

    #[test]
    fn scalar_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_mat(&mut rng, 2, 3).mapv(|x| x + 2.0); // keep positive for ln/sqrt
        let b = rand_mat(&mut rng, 2, 3).mapv(|x| x + 2.0);
        check(&[a, b], |t, ids| {
            let dot = t.mul(ids[0], ids[1]);
            let s = t.sum_all(dot); // scalar
            let sq = t.sqrt(s);
            let scaled = t.div_scalar(ids[0], sq);
            let logged = t.ln(ids[1]);
            let prod = t.mul_scalar(logged, sq);
            let both = t.add(scaled, prod);
            t.sum_all(both)
        });
    }

    #[test]
    fn mean_rows_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 4, 3);
        let w = rand_mat(&mut rng, 1, 3);
        check(&[a, w], |t, ids| {
            let m = t.mean_rows(ids[0]);
            let weighted = t.mul(m, ids[1]);
            t.sum_all(weighted)
        });
    }

    #[test]
    fn gather_rows_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let table = rand_mat(&mut rng, 5, 3);
        let w = rand_mat(&mut rng, 4, 3);
        check(&[table, w], |t, ids| {
            let g = t.gather_rows(ids[0], &[0, 2, 2, 4]); // duplicate index
            let weighted = t.mul(g, ids[1]);
            t.sum_all(weighted)
        });
    }

    #[test]
    fn cross_entropy_grad_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = rand_mat(&mut rng, 3, 4);
        // Uniform logits over k classes give loss ln(k).
        let mut t = Tape::new();
        let u = t.constant(Array2::zeros((2, 4)));
        let l = t.cross_entropy_mean(u, &[1, 3]);
        assert!((t.scalar(l) - 4.0_f64.ln()).abs() < 1e-12);
        check(&[logits], |t, ids| t.cross_entropy_mean(ids[0], &[1, 0, 3]));
    }

    #[test]
    fn constants_get_no_grad_but_pass_through() {
        let mut t = Tape::new();
        let w = t.constant(array![[2.0, 0.0], [0.0, 3.0]]);
        let x = t.var(array![[1.0, 1.0]]);
        let y = t.matmul(x, w);
        let loss = t.sum_all(y);
        let grads = t.backward(loss);
        assert!(grads.wrt(w).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &array![[2.0, 3.0]]);
    }

    #[test]
    fn add_row_broadcast_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        check(&[a, row], |t, ids| {
            let y = t.add_row(ids[0], ids[1]);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
    }

    #[test]
    fn sub_scale_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_mat(&mut rng, 2, 2);
        let b = rand_mat(&mut rng, 2, 2);
        check(&[a, b], |t, ids| {
            let d = t.sub(ids[0], ids[1]);
            let s = t.scale(d, 2.5);
            let s2 = t.mul(s, s);
            t.sum_all(s2)
        });
    }
}
