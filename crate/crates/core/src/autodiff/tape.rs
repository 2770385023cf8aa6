//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and parent ids, so
//! node order is a topological order. `backward` walks the nodes once in
//! reverse and accumulates vector-Jacobian products into per-node gradients.
//! Only nodes reachable from a `requires_grad` leaf carry gradients.

use std::fmt;

use super::tensor::{matmul_into, transpose, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows { input: Var, scale: f64 },
    LogSoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    SigmoidFocal { logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Record of primitive operations for one forward build.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require a gradient. A reachable-but-unused leaf gets a zero tensor.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::raw(vec![r, c], g.clone()))
    }

    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        self.get(v).unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

#[inline]
fn bidx(b: (usize, usize), i: usize, j: usize) -> usize {
    let bi = if b.0 == 1 { 0 } else { i };
    let bj = if b.1 == 1 { 0 } else { j };
    bi * b.1 + bj
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let (r, c) = value.dims();
        let value = if value.shape().len() == 2 {
            value
        } else {
            Tensor::raw(vec![r, c], value.into_data())
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t.with_grad(false), rg)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_grad(false), false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_grad(false), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        ensure!(k == k2, Dimension, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::raw(vec![m, n], out), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = transpose(self.data(a), m, n);
        let rg = self.rg(a);
        self.push(Op::Transpose(a), Tensor::raw(vec![n, m], out), rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        ensure!(
            broadcast_ok(da, db),
            Dimension,
            "{name}: {}x{} with {}x{}",
            da.0,
            da.1,
            db.0,
            db.1
        );
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = Vec::with_capacity(da.0 * da.1);
        for i in 0..da.0 {
            for j in 0..da.1 {
                out.push(f(av[i * da.1 + j], bv[bidx(db, i, j)]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor::raw(vec![da.0, da.1], out), rg))
    }

    /// Elementwise `a + b`; `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).iter().any(|&v| v == 0.0) {
            return Err(Error::Degenerate("division by zero".into()));
        }
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; on ties the gradient flows to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", Op::Minimum(a, b), |x, y| {
            if x <= y {
                x
            } else {
                y
            }
        })
    }

    /// Elementwise maximum; on ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", Op::Maximum(a, b), |x, y| {
            if x >= y {
                x
            } else {
                y
            }
        })
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op, Tensor::raw(vec![m, n], out), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        ensure!(
            self.data(a).iter().all(|&x| x > 0.0),
            Degenerate,
            "log of non-positive value"
        );
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), stable_sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Row-wise `softmax(scale · a)`, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.masked_softmax_rows(a, scale, None)
    }

    /// Row-wise softmax where columns flagged in `mask` get weight exactly 0.
    pub fn masked_softmax_rows(
        &mut self,
        a: Var,
        scale: f64,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (m, n) = self.dims(a);
        ensure!(n >= 1, Dimension, "softmax over empty rows");
        ensure!(scale > 0.0, Validation, "softmax scale must be positive");
        if let Some(mask) = mask {
            ensure!(mask.len() == n, Dimension, "mask length {} != {n}", mask.len());
            ensure!(mask.iter().any(|&x| !x), Validation, "every column masked");
        }
        let keep = |j: usize| mask.is_none_or(|mk| !mk[j]);
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j] * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] * scale - mx).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::SoftmaxRows { input: a, scale },
            Tensor::raw(vec![m, n], out),
            rg,
        ))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        ensure!(n >= 1, Dimension, "log-softmax over empty rows");
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmaxRows(a), Tensor::raw(vec![m, n], out), rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layernorm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.dims(a);
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * s;
            }
            inv_std.push(s);
        }
        let rg = self.rg(a);
        self.push(
            Op::LayerNormRows { input: a, inv_std },
            Tensor::raw(vec![m, n], out),
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            ensure!(c == n, Dimension, "concat_rows: {c} columns vs {n}");
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::raw(vec![rows, n], out),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        let m = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            ensure!(r == m, Dimension, "concat_cols: {r} rows vs {m}");
            total += c;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let d = self.data(p);
            for i in 0..m {
                out[i * total + off..i * total + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::raw(vec![m, total], out),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        ensure!(start + len <= m, Dimension, "slice_rows {start}+{len} of {m}");
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceRows { input: a, start },
            Tensor::raw(vec![len, n], out),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        ensure!(start + len <= n, Dimension, "slice_cols {start}+{len} of {n}");
        let x = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceCols { input: a, start },
            Tensor::raw(vec![m, len], out),
            rg,
        ))
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        ensure!(m >= 1, Contract, "mean over zero rows");
        let x = self.data(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += x[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(Op::MeanRows(a), Tensor::raw(vec![1, n], out), rg))
    }

    /// Sum across columns: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.data(a);
        let out = (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Op::SumCols(a), Tensor::raw(vec![m, 1], out), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(nrm > 0.0, Degenerate, "zero vector at row {i}");
            for j in 0..n {
                out[i * n + j] = row[j] / nrm;
            }
            norms.push(nrm);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::L2NormalizeRows { input: a, norms },
            Tensor::raw(vec![m, n], out),
            rg,
        ))
    }

    /// Row-wise cosine similarity of `a` against `b` (`m×n`, or `b` a single
    /// row broadcast over `a`). Returns `m×1`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        Ok(self.sum_cols(prod))
    }

    /// Elementwise sigmoid focal loss on logits against fixed `{0,1}` targets:
    /// `−α_t (1−p_t)^γ ln p_t` with `p = σ(x)`, computed through log-sigmoid.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: &[f64],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let (m, n) = self.dims(logits);
        ensure!(targets.len() == m * n, Dimension, "focal targets {} vs {}", targets.len(), m * n);
        let x = self.data(logits);
        let out = x
            .iter()
            .zip(targets)
            .map(|(&x, &t)| focal_elem(x, t, alpha, gamma).0)
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SigmoidFocal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            Tensor::raw(vec![m, n], out),
            rg,
        ))
    }

    /// Distance from the recorded point to the nearest kink among
    /// gradient-carrying `relu`, `abs`, `minimum` and `maximum` nodes: the
    /// smallest `|x|` fed to `relu`/`abs` or `|a − b|` compared by
    /// `minimum`/`maximum`. Infinite when there is none. Finite-difference
    /// checks are only meaningful well inside this margin.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    m = self.data(*a).iter().fold(m, |m, x| m.min(x.abs()));
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let (ra, rb) = (self.dims(*a), self.dims(*b));
                    let (xa, xb) = (self.data(*a), self.data(*b));
                    for i in 0..ra.0 {
                        for j in 0..ra.1 {
                            m = m.min((xa[i * ra.1 + j] - xb[bidx(rb, i, j)]).abs());
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Fills gradients for every node reachable from a `requires_grad` leaf.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        ensure!(!self.consumed, Contract, "backward already ran on this tape");
        let (r, c) = self.dims(loss);
        ensure!(r == 1 && c == 1, Contract, "loss must be scalar, got {r}x{c}");
        self.consumed = true;

        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| n.value.dims()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, &shapes);
            grads[idx] = Some(g);
        }

        // Leaves that require grad but were not reached get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        shapes: &[(usize, usize)],
    ) {
        let node = &self.nodes[idx];
        let (m, n) = shapes[idx];
        let y = node.value.data();

        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = shapes[a.0];
                let av = self.data(*a);
                let bv = self.data(*b);
                acc(*a, &|s| {
                    // dA = G · Bᵀ
                    let bt = transpose(bv, k, n);
                    matmul_into(g, &bt, s, m, n, k);
                });
                acc(*b, &|s| {
                    // dB = Aᵀ · G
                    let at = transpose(av, m, k);
                    matmul_into(&at, g, s, k, m, n);
                });
            }
            Op::Transpose(a) => acc(*a, &|s| {
                let gt = transpose(g, m, n);
                for (o, v) in s.iter_mut().zip(gt) {
                    *o += v;
                }
            }),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|s| {
                    for (o, v) in s.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                let db = shapes[b.0];
                acc(*b, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[bidx(db, i, j)] += sign * g[i * n + j];
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.data(*a);
                let bv = self.data(*b);
                let db = shapes[b.0];
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[i * n + j] * bv[bidx(db, i, j)];
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[bidx(db, i, j)] += g[i * n + j] * av[i * n + j];
                        }
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.data(*b);
                let db = shapes[b.0];
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[i * n + j] / bv[bidx(db, i, j)];
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            let k = bidx(db, i, j);
                            // d(a/b)/db = −(a/b)/b
                            s[k] -= g[i * n + j] * y[i * n + j] / bv[k];
                        }
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let av = self.data(*a);
                let bv = self.data(*b);
                let db = shapes[b.0];
                let pick_a = |i: usize, j: usize| {
                    let x = av[i * n + j];
                    let z = bv[bidx(db, i, j)];
                    if is_min {
                        x <= z
                    } else {
                        x >= z
                    }
                };
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            if pick_a(i, j) {
                                s[i * n + j] += g[i * n + j];
                            }
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            if !pick_a(i, j) {
                                s[bidx(db, i, j)] += g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| {
                for (o, v) in s.iter_mut().zip(g) {
                    *o += c * v;
                }
            }),
            Op::Offset(a) => acc(*a, &|s| {
                for (o, v) in s.iter_mut().zip(g) {
                    *o += v;
                }
            }),
            Op::Exp(a) => acc(*a, &|s| {
                for ((o, v), yv) in s.iter_mut().zip(g).zip(y) {
                    *o += v * yv;
                }
            }),
            Op::Log(a) => {
                let x = self.data(*a);
                acc(*a, &|s| {
                    for ((o, v), xv) in s.iter_mut().zip(g).zip(x) {
                        *o += v / xv;
                    }
                })
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, &|s| {
                    for ((o, v), xv) in s.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += v;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &|s| {
                for ((o, v), yv) in s.iter_mut().zip(g).zip(y) {
                    *o += v * yv * (1.0 - yv);
                }
            }),
            Op::Abs(a) => {
                let x = self.data(*a);
                acc(*a, &|s| {
                    for ((o, v), xv) in s.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += v;
                        } else if *xv < 0.0 {
                            *o -= v;
                        }
                    }
                })
            }
            Op::SoftmaxRows { input, scale } => acc(*input, &|s| {
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        s[i * n + j] += scale * yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => acc(*a, &|s| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        s[i * n + j] += gr[j] - y[i * n + j].exp() * gsum;
                    }
                }
            }),
            Op::LayerNormRows { input, inv_std } => acc(*input, &|s| {
                let nf = n as f64;
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        s[i * n + j] += inv_std[i] / nf * (nf * gr[j] - gsum - yr[j] * gy);
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let o = off;
                    acc(*p, &|s| {
                        for (x, v) in s.iter_mut().zip(&g[o..o + len]) {
                            *x += v;
                        }
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = shapes[p.0].1;
                    let o = off;
                    acc(*p, &|s| {
                        for i in 0..m {
                            for j in 0..c {
                                s[i * c + j] += g[i * n + o + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows { input, start } => {
                let cols = shapes[input.0].1;
                acc(*input, &|s| {
                    for (x, v) in s[start * cols..(start + m) * cols].iter_mut().zip(g) {
                        *x += v;
                    }
                })
            }
            Op::SliceCols { input, start } => {
                let cols = shapes[input.0].1;
                acc(*input, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * cols + start + j] += g[i * n + j];
                        }
                    }
                })
            }
            Op::MeanRows(a) => {
                let rows = shapes[a.0].0;
                acc(*a, &|s| {
                    for i in 0..rows {
                        for j in 0..n {
                            s[i * n + j] += g[j] / rows as f64;
                        }
                    }
                })
            }
            Op::SumCols(a) => {
                let cols = shapes[a.0].1;
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..cols {
                            s[i * cols + j] += g[i];
                        }
                    }
                })
            }
            Op::SumAll(a) => acc(*a, &|s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::L2NormalizeRows { input, norms } => acc(*input, &|s| {
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        s[i * n + j] += (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
            }),
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let x = self.data(*logits);
                acc(*logits, &|s| {
                    for k in 0..x.len() {
                        s[k] += g[k] * focal_elem(x[k], targets[k], *alpha, *gamma).1;
                    }
                })
            }
        }
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
/// Targets strictly between 0 and 1 are not meaningful here; any value other
/// than 1 is treated as a negative.
pub(crate) fn focal_elem(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = stable_sigmoid(x);
    if t == 1.0 {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let w = q.powf(gamma);
        let loss = -alpha * w * log_p;
        let d = alpha * w * (gamma * p * log_p - q);
        (loss, d)
    } else {
        let log_q = -softplus(x);
        let q = 1.0 - p;
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * log_q;
        let d = -(1.0 - alpha) * w * (gamma * q * log_q - p);
        (loss, d)
    }
}
