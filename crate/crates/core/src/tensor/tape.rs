use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Tensor, TensorError};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside the tensor core.
///
/// `inputs` are the values of the recorded parents, in order. Return one
/// gradient per parent (`None` where no gradient flows).
pub trait CustomBackward {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Square(Var),
    SoftmaxRows(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    FrobeniusSq(Var),
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations.
///
/// Nodes are stored in creation order, so parents always precede children
/// and a single reverse sweep visits each node once. A tape is consumed by
/// [`Tape::backward`]; record a fresh one for the next step.
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`; with `b` a `[out×in]` weight this is a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        if tb.is_scalar() {
            let s = tb.data()[0];
            return Ok(ta.map(|x| f(x, s)));
        }
        if ta.is_scalar() {
            let s = ta.data()[0];
            return Ok(tb.map(|x| f(s, x)));
        }
        Err(TensorError::Shape {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Row-wise softmax, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let cols = x.cols();
        if cols == 0 {
            return Err(TensorError::Shape {
                op: "softmax_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Root-mean-square normalization of each row, then a per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.numel() != d || d == 0 {
            return Err(TensorError::Shape {
                op: "rms_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut out = tx.clone();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for row in out.data_mut().chunks_exact_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            for (v, g) in row.iter_mut().zip(tg.data()) {
                *v *= r * g;
            }
            inv_rms.push(r);
        }
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_sq());
        let ng = self.needs(a);
        self.push(out, Op::FrobeniusSq(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[n_seq·seq_len × d]` with whole sequences stacked
    /// along the rows; attention never crosses a sequence boundary. Heads
    /// split the columns into `heads` contiguous groups.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(TensorError::Shape {
                op: "causal_attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (t, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 || seq_len == 0 || t % seq_len != 0 {
            return Err(TensorError::Shape {
                op: "causal_attention",
                lhs: tq.shape().to_vec(),
                rhs: vec![heads, seq_len],
            });
        }
        let (out, probs) = attention_forward(tq.data(), tk.data(), tv.data(), t, d, heads, seq_len);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let out = Tensor::new(&[t, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            ng,
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, value: Tensor, inputs: &[Var], rule: Box<dyn CustomBackward>) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            ng,
        )
    }

    /// Propagates gradients from a scalar `loss` to every node that needs one,
    /// then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.spent {
            return Err(TensorError::Usage(
                "backward called twice on the same tape; record a new one".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage(format!("unknown node {}", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        self.nodes.clear();
        self.spent = true;
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    acc(*a, shaped(ta, gemm_nt(g.data(), tb.data(), m, n, k)));
                }
                if self.needs(*b) {
                    acc(*b, shaped(tb, gemm_tn(ta.data(), g.data(), m, k, n)));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.needs(*a) {
                    acc(*a, shaped(ta, gemm_nn(g.data(), tb.data(), m, n, k)));
                }
                if self.needs(*b) {
                    acc(*b, shaped(tb, gemm_tn(g.data(), ta.data(), m, n, k)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, reduce_to(val(*a), g.clone()));
                acc(*b, reduce_to(val(*b), g.clone()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(val(*a), g.clone()));
                acc(*b, reduce_to(val(*b), g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.needs(*a) {
                    acc(*a, reduce_to(ta, broadcast_mul(g, tb)));
                }
                if self.needs(*b) {
                    acc(*b, reduce_to(tb, broadcast_mul(g, ta)));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Silu(a) => {
                let d = val(*a)
                    .zip_map(g, |x, gy| {
                        let s = sigmoid(x);
                        gy * s * (1.0 + x * (1.0 - s))
                    })
                    .expect("silu grad shape");
                acc(*a, d);
            }
            Op::Square(a) => {
                acc(*a, val(*a).zip_map(g, |x, gy| 2.0 * x * gy).expect("square grad shape"));
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let cols = p.cols();
                let mut d = g.clone();
                for (drow, prow) in d.data_mut().chunks_exact_mut(cols).zip(p.data().chunks_exact(cols)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(x, y)| x * y).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (val(*x), val(*gain));
                let dim = tx.cols();
                if self.needs(*x) {
                    let mut dx = vec![0.0; tx.numel()];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xs = &tx.data()[r * dim..(r + 1) * dim];
                        let gs = &g.data()[r * dim..(r + 1) * dim];
                        let proj: f64 = (0..dim).map(|j| gs[j] * tg.data()[j] * xs[j]).sum();
                        let coef = ir * ir * ir * proj / dim as f64;
                        for j in 0..dim {
                            dx[r * dim + j] = ir * tg.data()[j] * gs[j] - xs[j] * coef;
                        }
                    }
                    acc(*x, shaped(tx, dx));
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; dim];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..dim {
                            dg[j] += g.data()[r * dim + j] * tx.data()[r * dim + j] * ir;
                        }
                    }
                    acc(*gain, shaped(tg, dg));
                }
            }
            Op::FrobeniusSq(a) => {
                let s = g.data()[0];
                acc(*a, val(*a).map(|x| 2.0 * x * s));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(*a, Tensor::full(val(*a).shape(), s));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (dq, dk, dv) = attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    g.data(),
                    probs,
                    tq.rows(),
                    tq.cols(),
                    *heads,
                    *seq_len,
                );
                acc(*q, shaped(tq, dq));
                acc(*k, shaped(tk, dk));
                acc(*v, shaped(tv, dv));
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                for (v, gi) in inputs.iter().zip(rule.backward(g, &vals)) {
                    if let Some(gi) = gi {
                        acc(*v, gi);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn shaped(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape(), data).expect("gradient shape matches its value")
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == g.shape() {
        g.zip_map(other, |a, b| a * b).expect("same shape")
    } else {
        let s = other.data()[0];
        g.map(|a| a * s)
    }
}

/// Sums a full-shape gradient down to a broadcast scalar operand.
fn reduce_to(target: &Tensor, g: Tensor) -> Tensor {
    if target.shape() == g.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    seq_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_seq = t / seq_len;
    let mut out = vec![0.0; t * d];
    // probs[(s, h, i, j)] for j <= i; the upper triangle stays zero.
    let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
    let mut row = vec![0.0; seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..heads {
            let off = h * dh;
            let pbase = (s * heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let qi = &q[(base + i) * d + off..(base + i) * d + off + dh];
                for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(base + j) * d + off..(base + j) * d + off + dh];
                    *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(&mut row[..=i]);
                let o = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                for (j, &p) in row[..=i].iter().enumerate() {
                    probs[pbase + i * seq_len + j] = p;
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dh];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc += p * vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    seq_len: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_seq = t / seq_len;
    let (mut dq, mut dk, mut dv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
    let mut dp = vec![0.0; seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..heads {
            let off = h * dh;
            let pbase = (s * heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let gi = &g[(base + i) * d + off..(base + i) * d + off + dh];
                let p = &probs[pbase + i * seq_len..pbase + i * seq_len + i + 1];
                for j in 0..=i {
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dv[(base + j) * d + off..(base + j) * d + off + dh];
                    for (dvc, &gc) in dvj.iter_mut().zip(gi) {
                        *dvc += p[j] * gc;
                    }
                }
                let dot: f64 = (0..=i).map(|j| p[j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = scale * p[j] * (dp[j] - dot);
                    if ds == 0.0 {
                        continue;
                    }
                    let ri = (base + i) * d + off;
                    let rj = (base + j) * d + off;
                    for c in 0..dh {
                        dq[ri + c] += ds * k[rj + c];
                        dk[rj + c] += ds * q[ri + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
