//! Reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Graph`] is a per-forward-pass tape: leaves are parameters or
//! constants, interior nodes record the op and its inputs, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! Training builds one graph per sample and sums leaf gradients outside.

use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Handle to a node in one [`Graph`]. Only valid for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf { needs_grad: bool },
    Matmul(Var, Var),
    /// a * b^T
    MatmulTransB(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, S),
    /// x [n x d] plus a [1 x d] bias on every row.
    AddRowBroadcast(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: S },
    /// Row-wise softmax; with `causal_offset = Some(o)`, column j of row i is
    /// masked out unless j <= i + o (queries at row i may look back only).
    SoftmaxRows { x: Var, causal_offset: Option<usize> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Non-overlapping mean over groups of `stride` consecutive rows.
    MeanPoolRows(Var, usize),
    /// out row i = table row ids[i].
    GatherRows { table: Var, ids: Vec<usize> },
    /// Rotary position transform applied per head to column pairs.
    Rope { x: Var, n_heads: usize, base: f64, start_pos: usize },
    /// Masked mean negative log-likelihood; produces a 1x1 node.
    CrossEntropyMasked { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
}

pub struct Graph<S> {
    values: Vec<Matrix<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Leaf whose gradient will be accumulated (a trainable parameter).
    pub fn leaf(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf { needs_grad: true })
    }

    /// Leaf that never receives a gradient (frozen weights, activations of
    /// frozen stages, token embeddings of a frozen table).
    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf { needs_grad: false })
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        self.push(value, Op::Matmul(a, b))
    }

    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul_transb(&self.values[b.0]);
        self.push(value, Op::MatmulTransB(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].add(&self.values[b.0]);
        self.push(value, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].hadamard(&self.values[b.0]);
        self.push(value, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.values[a.0].scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let value = self.values[x.0].add_row_broadcast(&self.values[bias.0]);
        self.push(value, Op::AddRowBroadcast(x, bias))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Var {
        let value = layer_norm_forward(&self.values[x.0], &self.values[gain.0], &self.values[bias.0], eps);
        self.push(value, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn softmax_rows(&mut self, x: Var, causal_offset: Option<usize>) -> Var {
        let value = softmax_forward(&self.values[x.0], causal_offset);
        self.push(value, Op::SoftmaxRows { x, causal_offset })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<S>> = parts.iter().map(|v| &self.values[v.0]).collect();
        let value = Matrix::concat_rows(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.values[x.0].slice_rows(start, end);
        self.push(value, Op::SliceRows(x, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<S>> = parts.iter().map(|v| &self.values[v.0]).collect();
        let value = Matrix::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.values[x.0].slice_cols(start, end);
        self.push(value, Op::SliceCols(x, start, end))
    }

    pub fn mean_pool_rows(&mut self, x: Var, stride: usize) -> Var {
        let value = mean_pool_forward(&self.values[x.0], stride);
        self.push(value, Op::MeanPoolRows(x, stride))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.values[table.0];
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(value, Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn rope(&mut self, x: Var, n_heads: usize, base: f64, start_pos: usize) -> Var {
        let value = rope_forward(&self.values[x.0], n_heads, base, start_pos, false);
        self.push(value, Op::Rope { x, n_heads, base, start_pos })
    }

    /// Mean NLL over the target positions where `mask` is set. With an
    /// all-false mask the loss is defined as exactly zero.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let value = cross_entropy_forward(&self.values[logits.0], targets, mask);
        self.push(
            Matrix::from_vec(1, 1, vec![value]),
            Op::CrossEntropyMasked { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        )
    }

    fn accumulate(&mut self, v: Var, delta: Matrix<S>) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    /// Backpropagates from `loss` (must be 1x1) through the whole tape.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.values[loss.0].shape(), (1, 1), "backward expects a scalar loss node");
        self.grads[loss.0] = Some(Matrix::filled(1, 1, S::one()));

        for idx in (0..self.ops.len()).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            // Ops take the op out to appease the borrow checker, then put it back.
            let op = std::mem::replace(&mut self.ops[idx], Op::Leaf { needs_grad: false });
            match &op {
                Op::Leaf { needs_grad } => {
                    if *needs_grad {
                        self.grads[idx] = Some(g);
                        self.ops[idx] = op;
                        continue;
                    }
                }
                Op::Matmul(a, b) => {
                    let ga = g.matmul_transb(&self.values[b.0]);
                    let gb = self.values[a.0].transpose().matmul(&g);
                    self.accumulate(*a, ga);
                    self.accumulate(*b, gb);
                }
                Op::MatmulTransB(a, b) => {
                    let ga = g.matmul(&self.values[b.0]);
                    let gb = g.transpose().matmul(&self.values[a.0]);
                    self.accumulate(*a, ga);
                    self.accumulate(*b, gb);
                }
                Op::Add(a, b) => {
                    self.accumulate(*a, g.clone());
                    self.accumulate(*b, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(&self.values[b.0]);
                    let gb = g.hadamard(&self.values[a.0]);
                    self.accumulate(*a, ga);
                    self.accumulate(*b, gb);
                }
                Op::Scale(a, c) => {
                    self.accumulate(*a, g.scale(*c));
                }
                Op::AddRowBroadcast(x, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(*x, g);
                    self.accumulate(*bias, gb);
                }
                Op::Gelu(x) => {
                    let gx = gelu_backward(&self.values[x.0], &g);
                    self.accumulate(*x, gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (gx, ggain, gbias) =
                        layer_norm_backward(&self.values[x.0], &self.values[gain.0], *eps, &g);
                    self.accumulate(*x, gx);
                    self.accumulate(*gain, ggain);
                    self.accumulate(*bias, gbias);
                }
                Op::SoftmaxRows { x, .. } => {
                    let gx = softmax_backward(&self.values[idx], &g);
                    self.accumulate(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = self.values[p.0].rows();
                        self.accumulate(*p, g.slice_rows(at, at + rows));
                        at += rows;
                    }
                }
                Op::SliceRows(x, start, end) => {
                    let mut gx = Matrix::zeros(self.values[x.0].rows(), self.values[x.0].cols());
                    for r in *start..*end {
                        gx.row_mut(r).copy_from_slice(g.row(r - start));
                    }
                    self.accumulate(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let cols = self.values[p.0].cols();
                        self.accumulate(*p, g.slice_cols(at, at + cols));
                        at += cols;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let (rows, cols) = self.values[x.0].shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    self.accumulate(*x, gx);
                }
                Op::MeanPoolRows(x, stride) => {
                    let inv = S::one() / S::from_f(*stride as f64);
                    let mut gx = Matrix::zeros(self.values[x.0].rows(), self.values[x.0].cols());
                    for r in 0..gx.rows() {
                        let src = g.row(r / stride);
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(src) {
                            *o = v * inv;
                        }
                    }
                    self.accumulate(*x, gx);
                }
                Op::GatherRows { table, ids } => {
                    let mut gt = Matrix::zeros(self.values[table.0].rows(), self.values[table.0].cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(*table, gt);
                }
                Op::Rope { x, n_heads, base, start_pos } => {
                    let gx = rope_forward(&g, *n_heads, *base, *start_pos, true);
                    self.accumulate(*x, gx);
                }
                Op::CrossEntropyMasked { logits, targets, mask } => {
                    let gl = cross_entropy_backward(&self.values[logits.0], targets, mask, g.get(0, 0));
                    self.accumulate(*logits, gl);
                }
            }
            self.ops[idx] = op;
        }
    }
}

pub fn gelu<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::from_f(0.7978845608028654); // sqrt(2/pi)
    let k = S::from_f(0.044715);
    let half = S::from_f(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_backward<S: Scalar>(x: &Matrix<S>, g: &Matrix<S>) -> Matrix<S> {
    let c = S::from_f(0.7978845608028654);
    let k = S::from_f(0.044715);
    let half = S::from_f(0.5);
    let three = S::from_f(3.0);
    let mut out = x.clone();
    for (o, &gv) in out.data_mut().iter_mut().zip(g.data()) {
        let xv = *o;
        let u = c * (xv + k * xv * xv * xv);
        let t = u.tanh();
        let du = c * (S::one() + three * k * xv * xv);
        let d = half * (S::one() + t) + half * xv * (S::one() - t * t) * du;
        *o = gv * d;
    }
    out
}

fn layer_norm_forward<S: Scalar>(x: &Matrix<S>, gain: &Matrix<S>, bias: &Matrix<S>, eps: S) -> Matrix<S> {
    assert_eq!(gain.shape(), (1, x.cols()), "layer_norm gain must be 1 x d");
    assert_eq!(bias.shape(), (1, x.cols()), "layer_norm bias must be 1 x d");
    let d = S::from_f(x.cols() as f64);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
        let rstd = S::one() / (var + eps).sqrt();
        for (i, (o, &v)) in out.row_mut(r).iter_mut().zip(row).enumerate() {
            *o = (v - mean) * rstd * gain.get(0, i) + bias.get(0, i);
        }
    }
    out
}

fn layer_norm_backward<S: Scalar>(
    x: &Matrix<S>,
    gain: &Matrix<S>,
    eps: S,
    g: &Matrix<S>,
) -> (Matrix<S>, Matrix<S>, Matrix<S>) {
    let d = S::from_f(x.cols() as f64);
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    let mut ggain = Matrix::zeros(1, x.cols());
    let mut gbias = Matrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
        let rstd = S::one() / (var + eps).sqrt();

        // xhat_i = (x_i - mean) * rstd; dy_i = g_i * gain_i
        let mut sum_dy = S::zero();
        let mut sum_dy_xhat = S::zero();
        for i in 0..x.cols() {
            let xhat = (row[i] - mean) * rstd;
            let dy = g.get(r, i) * gain.get(0, i);
            sum_dy += dy;
            sum_dy_xhat += dy * xhat;
            ggain.row_mut(0)[i] += g.get(r, i) * xhat;
            gbias.row_mut(0)[i] += g.get(r, i);
        }
        let inv_d = S::one() / d;
        for i in 0..x.cols() {
            let xhat = (row[i] - mean) * rstd;
            let dy = g.get(r, i) * gain.get(0, i);
            gx.set(r, i, rstd * (dy - sum_dy * inv_d - xhat * sum_dy_xhat * inv_d));
        }
    }
    (gx, ggain, gbias)
}

fn softmax_forward<S: Scalar>(x: &Matrix<S>, causal_offset: Option<usize>) -> Matrix<S> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let limit = match causal_offset {
            Some(o) => (r + o + 1).min(x.cols()),
            None => x.cols(),
        };
        let row = &x.row(r)[..limit];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (i, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.set(r, i, e);
            sum += e;
        }
        let inv = S::one() / sum;
        for i in 0..limit {
            let v = out.get(r, i) * inv;
            out.set(r, i, v);
        }
    }
    out
}

fn softmax_backward<S: Scalar>(y: &Matrix<S>, g: &Matrix<S>) -> Matrix<S> {
    // dx = y * (g - sum(g * y)) per row; masked columns have y = 0.
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let dot: S = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
        for i in 0..y.cols() {
            out.set(r, i, y.get(r, i) * (g.get(r, i) - dot));
        }
    }
    out
}

fn mean_pool_forward<S: Scalar>(x: &Matrix<S>, stride: usize) -> Matrix<S> {
    assert!(stride > 0 && x.rows() % stride == 0, "row count {} not divisible by stride {}", x.rows(), stride);
    let out_rows = x.rows() / stride;
    let inv = S::one() / S::from_f(stride as f64);
    let mut out = Matrix::zeros(out_rows, x.cols());
    for r in 0..x.rows() {
        let dst = r / stride;
        for c in 0..x.cols() {
            let v = out.get(dst, c) + x.get(r, c) * inv;
            out.set(dst, c, v);
        }
    }
    out
}

/// Applies the rotary transform in place semantics (returns a new matrix).
/// `invert` rotates by the negative angle, which is the transpose map used by
/// the backward pass.
fn rope_forward<S: Scalar>(x: &Matrix<S>, n_heads: usize, base: f64, start_pos: usize, invert: bool) -> Matrix<S> {
    assert!(n_heads > 0 && x.cols() % n_heads == 0, "cols {} not divisible by heads {}", x.cols(), n_heads);
    let head_dim = x.cols() / n_heads;
    assert!(head_dim % 2 == 0, "head dim must be even for rotary positions");
    let mut out = x.clone();
    for r in 0..x.rows() {
        let pos = (start_pos + r) as f64;
        let row = out.row_mut(r);
        for h in 0..n_heads {
            let off = h * head_dim;
            for p in 0..head_dim / 2 {
                let theta = pos * base.powf(-2.0 * p as f64 / head_dim as f64);
                let theta = if invert { -theta } else { theta };
                let (sin, cos) = (S::from_f(theta.sin()), S::from_f(theta.cos()));
                let a = row[off + 2 * p];
                let b = row[off + 2 * p + 1];
                row[off + 2 * p] = a * cos - b * sin;
                row[off + 2 * p + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

fn cross_entropy_forward<S: Scalar>(logits: &Matrix<S>, targets: &[usize], mask: &[bool]) -> S {
    assert_eq!(logits.rows(), targets.len(), "one logit row per target");
    assert_eq!(targets.len(), mask.len(), "mask length must match targets");
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return S::zero();
    }
    let mut total = S::zero();
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(r);
        assert!(t < row.len(), "target id {} out of vocab {}", t, row.len());
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let logsumexp = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        total += logsumexp - row[t];
    }
    total / S::from_f(count as f64)
}

fn cross_entropy_backward<S: Scalar>(
    logits: &Matrix<S>,
    targets: &[usize],
    mask: &[bool],
    upstream: S,
) -> Matrix<S> {
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    if count == 0 {
        return out;
    }
    let scale = upstream / S::from_f(count as f64);
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
        for (c, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let delta = if c == t { p - S::one() } else { p };
            out.set(r, c, delta * scale);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` with respect to entry (r, c) of the
    /// matrix fed through `build`. The oracle every op is checked against.
    fn finite_diff(
        base: &Matrix<f64>,
        r: usize,
        c: usize,
        eval: &dyn Fn(&Matrix<f64>) -> f64,
    ) -> f64 {
        let h = 1e-6;
        let mut plus = base.clone();
        plus.set(r, c, plus.get(r, c) + h);
        let mut minus = base.clone();
        minus.set(r, c, minus.get(r, c) - h);
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    }

    fn assert_grad_close(analytic: f64, numeric: f64) {
        let denom = numeric.abs().max(analytic.abs()).max(1e-4);
        assert!(
            (analytic - numeric).abs() / denom < 1e-5,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        // Small deterministic LCG; keeps the test free of RNG crate churn.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
    }

    /// Scalar readout used to turn any op output into a loss: weighted sum.
    fn readout(m: &Matrix<f64>) -> f64 {
        m.data().iter().enumerate().map(|(i, &v)| v * (0.3 + 0.1 * i as f64)).sum()
    }

    /// Scalarizes `y` with the same weights `readout` uses, so the analytic
    /// gradient of this loss matches finite differences of `readout`.
    fn weighted_sum_loss(g: &mut Graph<f64>, y: Var) -> Var {
        let (rows, cols) = g.value(y).shape();
        let w = Matrix::from_fn(rows, cols, |r, c| 0.3 + 0.1 * (r * cols + c) as f64);
        let wv = g.constant(w);
        let prod = g.hadamard(y, wv);
        let pooled = g.mean_pool_rows(prod, rows); // 1 x cols
        let ones = g.constant(Matrix::filled(1, cols, 1.0));
        let loss = g.matmul_transb(pooled, ones); // 1 x 1
        g.scale(loss, rows as f64) // undo the mean
    }

    fn check_unary(build: impl Fn(&mut Graph<f64>, Var) -> Var, x: Matrix<f64>) {
        let eval = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let v = g.leaf(m.clone());
            let y = build(&mut g, v);
            readout(g.value(y))
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let y = build(&mut g, v);
        let loss = weighted_sum_loss(&mut g, y);
        g.backward(loss);
        let analytic = g.grad(v).expect("leaf grad").clone();

        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let numeric = finite_diff(&x, r, c, &eval);
                assert_grad_close(analytic.get(r, c), numeric);
            }
        }
    }

    #[test]
    fn grad_matmul_both_sides() {
        let a0 = rand_matrix(3, 4, 1);
        let b0 = rand_matrix(4, 2, 2);
        let eval_a = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let a = g.leaf(m.clone());
            let b = g.constant(b0.clone());
            let y = g.matmul(a, b);
            readout(g.value(y))
        };
        let eval_b = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let a = g.constant(a0.clone());
            let b = g.leaf(m.clone());
            let y = g.matmul(a, b);
            readout(g.value(y))
        };
        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let b = g.leaf(b0.clone());
        let y = g.matmul(a, b);
        let l = weighted_sum_loss(&mut g, y);
        g.backward(l);
        let ga = g.grad(a).unwrap().clone();
        let gb = g.grad(b).unwrap().clone();
        for r in 0..3 {
            for c in 0..4 {
                assert_grad_close(ga.get(r, c), finite_diff(&a0, r, c, &eval_a));
            }
        }
        for r in 0..4 {
            for c in 0..2 {
                assert_grad_close(gb.get(r, c), finite_diff(&b0, r, c, &eval_b));
            }
        }
    }

    #[test]
    fn grad_gelu() {
        check_unary(|g, x| g.gelu(x), rand_matrix(3, 3, 7));
    }

    #[test]
    fn grad_softmax_plain_and_causal() {
        check_unary(|g, x| g.softmax_rows(x, None), rand_matrix(3, 5, 11));
        check_unary(|g, x| g.softmax_rows(x, Some(1)), rand_matrix(4, 4, 13));
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let x0 = rand_matrix(3, 4, 17);
        let gain0 = rand_matrix(1, 4, 19);
        let bias0 = rand_matrix(1, 4, 23);
        let run = |x: &Matrix<f64>, gain: &Matrix<f64>, bias: &Matrix<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let gv = g.leaf(gain.clone());
            let bv = g.leaf(bias.clone());
            let y = g.layer_norm(xv, gv, bv, 1e-5);
            (g, xv, gv, bv, y)
        };
        let (mut g, xv, gv, bv, y) = run(&x0, &gain0, &bias0);
        let l = weighted_sum_loss(&mut g, y);
        g.backward(l);

        let eval = |x: &Matrix<f64>, gain: &Matrix<f64>, bias: &Matrix<f64>| {
            let (g, _, _, _, y) = run(x, gain, bias);
            readout(g.value(y))
        };
        let gx = g.grad(xv).unwrap().clone();
        for r in 0..3 {
            for c in 0..4 {
                let n = finite_diff(&x0, r, c, &|m| eval(m, &gain0, &bias0));
                assert_grad_close(gx.get(r, c), n);
            }
        }
        let gg = g.grad(gv).unwrap().clone();
        let gb = g.grad(bv).unwrap().clone();
        for c in 0..4 {
            let n = finite_diff(&gain0, 0, c, &|m| eval(&x0, m, &bias0));
            assert_grad_close(gg.get(0, c), n);
            let n = finite_diff(&bias0, 0, c, &|m| eval(&x0, &gain0, m));
            assert_grad_close(gb.get(0, c), n);
        }
    }

    #[test]
    fn grad_structural_ops() {
        check_unary(|g, x| g.slice_rows(x, 1, 3), rand_matrix(4, 3, 29));
        check_unary(|g, x| g.slice_cols(x, 1, 3), rand_matrix(3, 4, 31));
        check_unary(|g, x| g.mean_pool_rows(x, 2), rand_matrix(6, 3, 37));
        check_unary(|g, x| g.rope(x, 2, 10_000.0, 3), rand_matrix(4, 8, 41));
        check_unary(
            |g, x| {
                let a = g.slice_rows(x, 0, 2);
                let b = g.slice_rows(x, 2, 5);
                g.concat_rows(&[a, b])
            },
            rand_matrix(5, 3, 43),
        );
        check_unary(
            |g, x| {
                let a = g.slice_cols(x, 0, 1);
                let b = g.slice_cols(x, 1, 3);
                g.concat_cols(&[b, a])
            },
            rand_matrix(4, 3, 61),
        );
    }

    #[test]
    fn grad_gather_rows() {
        let table0 = rand_matrix(5, 3, 47);
        let ids = vec![1usize, 3, 1];
        let eval = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let t = g.leaf(m.clone());
            let y = g.gather_rows(t, &ids);
            readout(g.value(y))
        };
        let mut g = Graph::new();
        let t = g.leaf(table0.clone());
        let y = g.gather_rows(t, &ids);
        let l = weighted_sum_loss(&mut g, y);
        g.backward(l);
        let gt = g.grad(t).unwrap().clone();
        for r in 0..5 {
            for c in 0..3 {
                assert_grad_close(gt.get(r, c), finite_diff(&table0, r, c, &eval));
            }
        }
    }

    #[test]
    fn grad_cross_entropy_masked() {
        let logits0 = rand_matrix(4, 6, 53);
        let targets = vec![2usize, 0, 5, 1];
        let mask = vec![true, false, true, true];
        let eval = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let l = g.leaf(m.clone());
            let loss = g.cross_entropy_masked(l, &targets, &mask);
            g.value(loss).get(0, 0)
        };
        let mut g = Graph::new();
        let l = g.leaf(logits0.clone());
        let loss = g.cross_entropy_masked(l, &targets, &mask);
        g.backward(loss);
        let gl = g.grad(l).unwrap().clone();
        for r in 0..4 {
            for c in 0..6 {
                assert_grad_close(gl.get(r, c), finite_diff(&logits0, r, c, &eval));
            }
        }
        // Perturbing a masked-out row's logits never changes the loss.
        let mut perturbed = logits0.clone();
        perturbed.set(1, 3, 99.0);
        assert_eq!(eval(&logits0), eval(&perturbed));
    }

    #[test]
    fn all_false_mask_is_zero_loss_and_zero_grad() {
        let logits = rand_matrix(3, 4, 59);
        let mut g = Graph::new();
        let l = g.leaf(logits);
        let loss = g.cross_entropy_masked(l, &[0, 1, 2], &[false, false, false]);
        assert_eq!(g.value(loss).get(0, 0), 0.0);
        g.backward(loss);
        let gl = g.grad(l).unwrap();
        assert!(gl.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let v = 11;
        let logits = Matrix::filled(1, v, 0.25f64);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let loss = g.cross_entropy_masked(l, &[4], &[true]);
        let expected = (v as f64).ln();
        assert!((g.value(loss).get(0, 0) - expected).abs() < 1e-12);
    }
}
