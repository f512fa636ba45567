//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the tape from the loss node down to index 0, so reductions run in a
//! fixed order and repeated runs are bit-reproducible.

use super::kernels::{gemm, Transpose as T};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking metadata for [`Graph::attention`].
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `batch * k_len` flags, `true` for keys that may be attended to.
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    SumCols(Var),
    Gather { table: Var, ids: Vec<usize> },
    Concat(Var, Var),
    Pick { x: Var, idx: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: Box<AttentionSpec>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Elu(_) => "elu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::Gather { .. } => "gather_rows",
            Op::Concat(..) => "concat",
            Op::Pick { .. } => "pick",
            Op::Attention { .. } => "attention",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Concat(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Elu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Abs(x)
            | Op::Softplus(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::SumCols(x) => vec![*x],
            Op::Affine { x, .. } | Op::LayerNorm { x, .. } | Op::Pick { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type R = Result<Var, NumericsError>;

fn stable_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check(&self, v: Var) -> Result<&Tensor, NumericsError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(NumericsError::UnknownVar(v.0))
    }

    fn push(&mut self, value: Tensor, op: Op) -> R {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        let t = self.check(v)?;
        if t.shape().len() != 2 {
            return Err(NumericsError::Rank {
                op,
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> R {
        self.push(t, Op::Leaf)
    }

    /// Reads the current value of a parameter into the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> R {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            T::No,
            self.value(b).data(),
            T::No,
            &mut out,
            0.0,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> R {
        let (m, n) = self.matrix("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> R {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> R {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> R {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> R {
        let (m, n) = self.matrix(name, x)?;
        if self.check(r)?.len() != n {
            return Err(self.mismatch(name, x, r));
        }
        let xs = self.value(x).data();
        let rs = self.value(r).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(f(xs[i * n + j], rs[j]));
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, op)
    }

    /// `x[i, j] + r[j]` for `x: [m, n]` and any `r` holding `n` values.
    pub fn add_row(&mut self, x: Var, r: Var) -> R {
        self.row_broadcast("add_row", x, r, |a, b| a + b, Op::AddRow(x, r))
    }

    /// `x[i, j] * r[j]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> R {
        self.row_broadcast("mul_row", x, r, |a, b| a * b, Op::MulRow(x, r))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> R {
        let t = self.check(x)?.map(|v| scale * v + shift);
        self.push(t, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> R {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`, evaluated as `1.0 - x` so that `x == 1` gives an exact zero.
    pub fn one_minus(&mut self, x: Var) -> R {
        let t = self.check(x)?.map(|v| 1.0 - v);
        self.push(t, Op::Affine { x, scale: -1.0 })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> R {
        let t = self.check(x)?.map(f);
        self.push(t, op)
    }

    pub fn tanh(&mut self, x: Var) -> R {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> R {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> R {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `x` for `x >= 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Var) -> R {
        self.unary(x, |v| if v >= 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    pub fn exp(&mut self, x: Var) -> R {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> R {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> R {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn softplus(&mut self, x: Var) -> R {
        self.unary(x, softplus, Op::Softplus(x))
    }

    fn check_reduced_axis(&self, op: &'static str, x: Var) -> Result<(), NumericsError> {
        let t = self.check(x)?;
        if t.shape().is_empty() || t.cols() == 0 {
            return Err(NumericsError::EmptySoftmax { op });
        }
        Ok(())
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> R {
        self.check_reduced_axis("softmax", x)?;
        let t = self.value(x);
        let n = t.cols();
        let mut out = vec![0.0; t.len()];
        for (row, o) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            stable_softmax_row(row, o);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> R {
        self.check_reduced_axis("log_softmax", x)?;
        let t = self.value(x);
        let n = t.cols();
        let mut out = vec![0.0; t.len()];
        for (row, o) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for (o, &v) in o.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::LogSoftmax(x))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> R {
        let (m, n) = self.matrix("layer_norm", x)?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mut mean = 0.0;
            for &v in row {
                mean += v;
            }
            mean /= n as f64;
            let mut var = 0.0;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * s;
            }
        }
        let t = Tensor::new(vec![m, n], out.clone())?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                normalized: out,
                inv_std,
            },
        )
    }

    /// Sum of every entry, shape `[]`.
    pub fn sum(&mut self, x: Var) -> R {
        let mut s = 0.0;
        for &v in self.check(x)?.data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> R {
        let n = self.check(x)?.len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> R {
        let (m, n) = self.matrix("sum_cols", x)?;
        let xs = self.value(x).data();
        let out = (0..m)
            .map(|i| {
                let mut s = 0.0;
                for &v in &xs[i * n..(i + 1) * n] {
                    s += v;
                }
                s
            })
            .collect();
        self.push(Tensor::new(vec![m, 1], out)?, Op::SumCols(x))
    }

    /// Row lookup: embedding tables, CLS extraction and per-example broadcast.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> R {
        let (rows, n) = self.matrix("gather_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![ids.len(), n], out)?;
        self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Column concatenation, `[m, a] ++ [m, b] -> [m, a + b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> R {
        let (m, na) = self.matrix("concat", a)?;
        let (m2, nb) = self.matrix("concat", b)?;
        if m != m2 {
            return Err(self.mismatch("concat", a, b));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&xa[i * na..(i + 1) * na]);
            out.extend_from_slice(&xb[i * nb..(i + 1) * nb]);
        }
        self.push(Tensor::new(vec![m, na + nb], out)?, Op::Concat(a, b))
    }

    /// Selects `x[i, idx[i]]`, `[m, n] -> [m, 1]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> R {
        let (m, n) = self.matrix("pick", x)?;
        if idx.len() != m {
            return Err(NumericsError::ShapeMismatch {
                op: "pick",
                lhs: vec![m, n],
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(NumericsError::IndexOutOfRange {
                op: "pick",
                index: bad,
                bound: n,
            });
        }
        let xs = self.value(x).data();
        let out = idx.iter().enumerate().map(|(i, &j)| xs[i * n + j]).collect();
        self.push(
            Tensor::new(vec![m, 1], out)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Multi-head masked scaled dot-product attention.
    ///
    /// `q` is `[batch * q_len, d]`, `k` and `v` are `[batch * k_len, d]`; heads
    /// split `d` into contiguous slices. Disallowed keys are skipped outright,
    /// so their values never enter the output sums.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> R {
        let (qr, d) = self.matrix("attention", q)?;
        let (kr, dk) = self.matrix("attention", k)?;
        let (vr, dv) = self.matrix("attention", v)?;
        if qr != spec.batch * spec.q_len || d != dk {
            return Err(self.mismatch("attention", q, k));
        }
        if kr != spec.batch * spec.k_len || vr != kr || dv != d {
            return Err(self.mismatch("attention", k, v));
        }
        if spec.heads == 0 || d % spec.heads != 0 || spec.key_mask.len() != kr {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                lhs: vec![d],
                rhs: vec![spec.heads, spec.key_mask.len()],
            });
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (nq, nk) = (spec.q_len, spec.k_len);
        let mut probs = vec![0.0; spec.batch * spec.heads * nq * nk];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; nk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..nq {
                    let qrow = &qs[(b * nq + i) * d + off..(b * nq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    let mut any = false;
                    for j in 0..nk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        any = true;
                        let krow = &ks[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += qrow[t] * krow[t];
                        }
                        scores[j] = s * scale;
                        max = max.max(scores[j]);
                    }
                    if !any {
                        return Err(NumericsError::EmptySoftmax { op: "attention" });
                    }
                    let p = &mut probs[((b * spec.heads + h) * nq + i) * nk..][..nk];
                    let mut sum = 0.0;
                    for j in 0..nk {
                        if spec.allowed(b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            sum += p[j];
                        }
                    }
                    let orow = &mut out[(b * nq + i) * d + off..(b * nq + i) * d + off + dh];
                    for j in 0..nk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        p[j] /= sum;
                        let vrow = &vs[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                        for t in 0..dh {
                            orow[t] += p[j] * vrow[t];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![qr, d], out)?;
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec: Box::new(spec),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar node. Parameter gradients are zeroed first and
    /// then accumulated into `store`; parameters off every path stay zero.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let root = self.check(loss)?;
        if root.len() != 1 || !root.shape().iter().all(|&d| d == 1) {
            return Err(NumericsError::NonScalarLoss {
                shape: root.shape().to_vec(),
            });
        }
        store.zero_grads();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(NumericsError::Cycle { node: i });
                }
            }
            if let Op::Param(id) = node.op {
                store.get_mut(id).grad.add_assign(&g);
                continue;
            }
            for (input, gi) in self.local_grads(node, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let out = &node.value;
        let with = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let xv = self.value(x);
            let data = xv
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            (x, Tensor::new(xv.shape().to_vec(), data).expect("shape"))
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), T::No, self.value(*b).data(), T::Yes, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, self.value(*a).data(), T::Yes, g.data(), T::No, &mut gb, 0.0);
                vec![
                    (*a, Tensor::new(vec![m, k], ga).expect("shape")),
                    (*b, Tensor::new(vec![k, n], gb).expect("shape")),
                ]
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g.data()[j * m + i];
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], ga).expect("shape"))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip3(g, vb, |gi, bi| gi * bi);
                let gb = zip3(g, va, |gi, ai| gi * ai);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                let ga = zip3(g, vb, |gi, bi| gi / bi);
                let gb_data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(vb.data())
                    .map(|((&gi, &yi), &bi)| -gi * yi / bi)
                    .collect();
                let gb = Tensor::new(vb.shape().to_vec(), gb_data).expect("shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(x, r) => {
                let n = out.cols();
                let mut gr = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in gr.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let rs = self.value(*r).shape().to_vec();
                vec![(*x, g.clone()), (*r, Tensor::new(rs, gr).expect("shape"))]
            }
            Op::MulRow(x, r) => {
                let n = out.cols();
                let (xv, rv) = (self.value(*x).data(), self.value(*r).data());
                let mut gx = vec![0.0; g.len()];
                let mut gr = vec![0.0; n];
                for (i, row) in g.data().chunks(n).enumerate() {
                    for j in 0..n {
                        gx[i * n + j] = row[j] * rv[j];
                        gr[j] += row[j] * xv[i * n + j];
                    }
                }
                let rs = self.value(*r).shape().to_vec();
                vec![
                    (*x, Tensor::new(out.shape().to_vec(), gx).expect("shape")),
                    (*r, Tensor::new(rs, gr).expect("shape")),
                ]
            }
            Op::Affine { x, scale } => vec![(*x, g.map(|v| v * scale))],
            Op::Tanh(x) => vec![with(*x, &|_, y, gi| gi * (1.0 - y * y))],
            Op::Sigmoid(x) => vec![with(*x, &|_, y, gi| gi * y * (1.0 - y))],
            Op::Relu(x) => vec![with(*x, &|xi, _, gi| if xi > 0.0 { gi } else { 0.0 })],
            Op::Elu(x) => vec![with(*x, &|xi, y, gi| if xi >= 0.0 { gi } else { gi * (y + 1.0) })],
            Op::Exp(x) => vec![with(*x, &|_, y, gi| gi * y)],
            Op::Log(x) => vec![with(*x, &|xi, _, gi| gi / xi)],
            Op::Abs(x) => vec![with(*x, &|xi, _, gi| gi * xi.signum())],
            Op::Softplus(x) => vec![with(*x, &|xi, _, gi| gi * sigmoid(xi))],
            Op::Softmax(x) => {
                let n = out.cols();
                let mut gx = vec![0.0; out.len()];
                for ((y, gr), o) in out.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += y[j] * gr[j];
                    }
                    for j in 0..n {
                        o[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), gx).expect("shape"))]
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                let mut gx = vec![0.0; out.len()];
                for ((y, gr), o) in out.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let mut total = 0.0;
                    for &v in gr {
                        total += v;
                    }
                    for j in 0..n {
                        o[j] = gr[j] - y[j].exp() * total;
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), gx).expect("shape"))]
            }
            Op::LayerNorm {
                x,
                normalized,
                inv_std,
            } => {
                let n = out.cols();
                let mut gx = vec![0.0; out.len()];
                for (i, gr) in g.data().chunks(n).enumerate() {
                    let xhat = &normalized[i * n..(i + 1) * n];
                    let mut mg = 0.0;
                    let mut mgx = 0.0;
                    for j in 0..n {
                        mg += gr[j];
                        mgx += gr[j] * xhat[j];
                    }
                    mg /= n as f64;
                    mgx /= n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv_std[i] * (gr[j] - mg - xhat[j] * mgx);
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), gx).expect("shape"))]
            }
            Op::Sum(x) => {
                let s = g.item();
                vec![(*x, Tensor::full(self.value(*x).shape(), s))]
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut gx = Vec::with_capacity(xv.len());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat_n(gi, n));
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), gx).expect("shape"))]
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (row, &id) in g.data().chunks(n).zip(ids) {
                    for (acc, &v) in gt[id * n..(id + 1) * n].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*table, Tensor::new(tv.shape().to_vec(), gt).expect("shape"))]
            }
            Op::Concat(a, b) => {
                let (na, nb) = (self.value(*a).cols(), self.value(*b).cols());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.data().chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                vec![
                    (*a, Tensor::new(self.value(*a).shape().to_vec(), ga).expect("shape")),
                    (*b, Tensor::new(self.value(*b).shape().to_vec(), gb).expect("shape")),
                ]
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * n + j] = g.data()[i];
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), gx).expect("shape"))]
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_grads(*q, *k, *v, spec, probs, g),
        }
    }

    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &Tensor,
    ) -> Vec<(Var, Tensor)> {
        let d = self.value(q).cols();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (nq, nk) = (spec.q_len, spec.k_len);
        let mut gq = vec![0.0; qs.len()];
        let mut gk = vec![0.0; ks.len()];
        let mut gv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; nk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..nq {
                    let p = &probs[((b * spec.heads + h) * nq + i) * nk..][..nk];
                    let qi = (b * nq + i) * d + off;
                    let grow = &g.data()[qi..qi + dh];
                    let mut dot = 0.0;
                    for j in 0..nk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        let vj = (b * nk + j) * d + off;
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += grow[t] * vs[vj + t];
                            gv[vj + t] += p[j] * grow[t];
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    for j in 0..nk {
                        if !spec.allowed(b, i, j) {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = (b * nk + j) * d + off;
                        for t in 0..dh {
                            gq[qi + t] += ds * ks[kj + t];
                            gk[kj + t] += ds * qs[qi + t];
                        }
                    }
                }
            }
        }
        let mk = |var: Var, data: Vec<f64>| {
            (
                var,
                Tensor::new(self.value(var).shape().to_vec(), data).expect("shape"),
            )
        };
        vec![mk(q, gq), mk(k, gk), mk(v, gv)]
    }
}

fn zip3(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(other.shape().to_vec(), data).expect("shape")
}
