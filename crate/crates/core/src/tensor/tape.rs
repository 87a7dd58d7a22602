//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] is rebuilt for every training step. Each primitive appends one
//! node holding its forward value; [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order because
//! a node can only reference nodes created before it.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, outer: usize, inner: usize, mids: Vec<usize> },
    Slice { x: Var, outer: usize, inner: usize, mid: usize, start: usize, end: usize },
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, mid: usize, inner: usize, scale: T },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Gather { table: Var, ids: Vec<usize>, row: usize },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, batch: usize, lq: usize, lk: usize, d: usize, dv: usize, scale: T },
    L2Normalize { x: Var, inv_norm: Vec<T> },
    TemporalShift { x: Var, batch: usize, time: usize, channels: usize, chunks: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation plus gradient storage.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    recorded_ops: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Split `dims` around `axis` into (outer, mid, inner) element counts.
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            recorded_ops: 0,
        }
    }

    /// A tape that evaluates values only; nothing is recorded for backward.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad {
            self.recorded_ops += 1;
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(mismatch(op, da, db));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("div", a, b)?;
        if self.value(b).data().iter().any(|x| x.is_zero()) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let value = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b), &[a, b]))
    }

    /// `x[..., d] + b[d]`, broadcasting `b` over all leading positions.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = self.row_broadcast("add_row", x, b, |p, q| p + q)?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[..., d] * g[d]`, broadcasting `g` over all leading positions.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let value = self.row_broadcast("mul_row", x, g, |p, q| p * q)?;
        Ok(self.push(value, Op::MulRow(x, g), &[x, g]))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || bv.len() != xv.last_dim() {
            return Err(mismatch(op, xv.dims(), bv.dims()));
        }
        let d = bv.len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &q) in row.iter_mut().zip(bv.data()) {
                *o = f(*o, q);
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: "argument must be strictly positive".into(),
            });
        }
        Ok(self.unary(x, T::ln, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: "argument must be non-negative".into(),
            });
        }
        Ok(self.unary(x, T::sqrt, Op::Sqrt(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    // ---- structure ---------------------------------------------------

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if bd.len() != 2 || *ad.last().unwrap() != bd[0] {
            return Err(mismatch("matmul", ad, bd));
        }
        let (k, n) = (bd[0], bd[1]);
        let m = self.value(a).len() / k;
        let mut dims = ad.to_vec();
        *dims.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let value = Tensor::new(dims, out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() < 2 {
            return Err(invalid(format!("transpose needs rank >= 2, got {dims:?}")));
        }
        let r = dims.len();
        let (rows, cols) = (dims[r - 2], dims[r - 1]);
        let batch = self.value(x).len() / (rows * cols);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        let mut nd = dims.clone();
        nd.swap(r - 2, r - 1);
        let value = Tensor::new(nd, out)?;
        Ok(self.push(value, Op::Transpose { x, batch, rows, cols }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.dims(*parts.first().ok_or_else(|| invalid("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut mids = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == first.len()
                && d.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &first, d));
            }
            mids.push(d[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = mids.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &mid) in parts.iter().zip(&mids) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mut dims = first;
        dims[axis] = total;
        let value = Tensor::new(dims, out)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            inner,
            mids,
        };
        Ok(self.push(value, op, parts))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || start >= end || end > dims[axis] {
            return Err(invalid(format!("slice {start}..{end} on axis {axis} of {dims:?}")));
        }
        let (outer, mid, inner) = split_axis(&dims, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * mid + start) * inner..(o * mid + end) * inner]);
        }
        let mut nd = dims;
        nd[axis] = end - start;
        let value = Tensor::new(nd, out)?;
        let op = Op::Slice {
            x,
            outer,
            inner,
            mid,
            start,
            end,
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Rows of `table[V, ...]` selected by `ids`, giving `[ids.len(), ...]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let dims = self.dims(table).to_vec();
        let vocab = dims[0];
        if ids.is_empty() {
            return Err(invalid("gather with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid(format!("gather id {bad} out of range 0..{vocab}")));
        }
        let row = self.value(table).len() / vocab;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut nd = dims;
        nd[0] = ids.len();
        let value = Tensor::new(nd, out)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
            row,
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Embedding lookup: alias of [`Tape::gather`] on a `[vocab, dim]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.dims(table).len() != 2 {
            return Err(invalid("embedding table must be [vocab, dim]"));
        }
        self.gather(table, ids)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    /// Sum over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, T::one())
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .dims(x)
            .get(axis)
            .ok_or_else(|| invalid(format!("mean_axis axis {axis} out of range")))?;
        self.reduce_axis(x, axis, T::one() / T::of(n as f64))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, scale: T) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(invalid(format!("reduce axis {axis} out of range for {dims:?}")));
        }
        let (outer, mid, inner) = split_axis(&dims, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let row = &src[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut nd: Vec<usize> = dims.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if nd.is_empty() {
            nd.push(1);
        }
        let value = Tensor::new(nd, out)?;
        let op = Op::SumAxis {
            x,
            mid,
            inner,
            scale,
        };
        Ok(self.push(value, op, &[x]))
    }

    // ---- normalisation and attention ----------------------------------

    /// `(x - mean) / sqrt(var + eps)` over the last axis, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let dn = T::of(d as f64);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * r);
            inv_std.push(r);
        }
        let value = Tensor::new(xv.dims().to_vec(), out).expect("same dims");
        self.push(value, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        out.chunks_mut(d).for_each(softmax_in_place);
        let value = Tensor::new(xv.dims().to_vec(), out).expect("same dims");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(xv.dims().to_vec(), out).expect("same dims");
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Unit-normalise along the last axis: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        let mut inv_norm = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let r = T::one() / (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
            inv_norm.push(r);
        }
        let value = Tensor::new(xv.dims().to_vec(), out).expect("same dims");
        self.push(value, Op::L2Normalize { x, inv_norm }, &[x])
    }

    /// Batched `softmax(q k^T * scale) v` with `q: [B, Lq, d]`,
    /// `k: [B, Lk, d]`, `v: [B, Lk, dv]`.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qd, kd, vd) = (self.dims(q).to_vec(), self.dims(k).to_vec(), self.dims(v).to_vec());
        if qd.len() != 3 || kd.len() != 3 || vd.len() != 3 {
            return Err(invalid("attention operands must be rank 3 [batch, tokens, width]"));
        }
        if qd[0] != kd[0] || qd[2] != kd[2] {
            return Err(mismatch("attention(q,k)", &qd, &kd));
        }
        if kd[0] != vd[0] || kd[1] != vd[1] {
            return Err(mismatch("attention(k,v)", &kd, &vd));
        }
        let (batch, lq, lk, d, dv) = (qd[0], qd[1], kd[1], qd[2], vd[2]);
        let scale = T::one() / T::of(d as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * lq * lk];
        let mut out = vec![T::zero(); batch * lq * dv];
        for b in 0..batch {
            let p = &mut probs[b * lq * lk..(b + 1) * lq * lk];
            T::gemm(lq, d, lk, &qs[b * lq * d..], false, &ks[b * lk * d..], true, T::zero(), p);
            p.iter_mut().for_each(|s| *s *= scale);
            p.chunks_mut(lk).for_each(softmax_in_place);
            T::gemm(lq, lk, dv, p, false, &vs[b * lk * dv..], false, T::zero(), &mut out[b * lq * dv..(b + 1) * lq * dv]);
        }
        let value = Tensor::new(vec![batch, lq, dv], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            probs,
            batch,
            lq,
            lk,
            d,
            dv,
            scale,
        };
        Ok(self.push(value, op, &[q, k, v]))
    }

    /// Channel-chunked forward time shift of `[batch, time, channels]` features.
    /// See [`crate::denoiser::temporal_shift`] for the index map.
    pub fn temporal_shift(&mut self, x: Var, chunks: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 3 {
            return Err(invalid(format!("temporal_shift expects [batch, time, channels], got {dims:?}")));
        }
        let (batch, time, channels) = (dims[0], dims[1], dims[2]);
        if chunks == 0 || channels % chunks != 0 {
            return Err(invalid(format!("{channels} channels not divisible into {chunks} chunks")));
        }
        let src = self.value(x).data();
        let width = channels / chunks;
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..time {
                for c in 0..channels {
                    let shift = c / width;
                    if t >= shift {
                        out[(b * time + t) * channels + c] = src[(b * time + t - shift) * channels + c];
                    }
                }
            }
        }
        let value = Tensor::new(dims, out)?;
        let op = Op::TemporalShift {
            x,
            batch,
            time,
            channels,
            chunks,
        };
        Ok(self.push(value, op, &[x]))
    }

    // ---- composites --------------------------------------------------

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean cross-entropy of `logits: [n, classes]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let dims = self.dims(logits).to_vec();
        let classes = *dims.last().unwrap();
        let n = self.value(logits).len() / classes;
        if targets.len() != n {
            return Err(mismatch("cross_entropy", &dims, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(invalid(format!("target class {bad} out of range 0..{classes}")));
        }
        let logp = self.log_softmax(logits);
        let mut onehot = vec![T::zero(); n * classes];
        for (i, &t) in targets.iter().enumerate() {
            onehot[i * classes + t] = T::one();
        }
        let mask = self.constant(Tensor::new(dims, onehot)?);
        let picked = self.mul(logp, mask)?;
        let total = self.sum(picked);
        Ok(self.scale(total, -T::one() / T::of(n as f64)))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulate `d loss / d leaf` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.recorded_ops == 0 {
            return Err(Error::Tape("backward on an empty tape: no differentiable operation was recorded".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Tape(format!("loss must be a scalar, got dims {:?}", lv.dims())));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Tape("loss does not depend on any leaf that requires grad".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut self.grads,
                };
                sink.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

trait NodeValues<T> {
    fn val(&self, v: impl std::borrow::Borrow<Var>) -> &Tensor<T>;
}

impl<T> NodeValues<T> for &[Node<T>] {
    fn val(&self, v: impl std::borrow::Borrow<Var>) -> &Tensor<T> {
        &self[v.borrow().0].value
    }
}

impl<'a, T: Scalar> GradSink<'a, T> {
    fn acc(&mut self, v: impl std::borrow::Borrow<Var>) -> Option<&mut [T]> {
        let v = *v.borrow();
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_with(&mut self, v: impl std::borrow::Borrow<Var>, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.acc(v) {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot += f(i);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = self.nodes;
        let out = nodes[i].value.data();
        match nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(a, |j| g[j]);
                self.acc_with(b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc_with(a, |j| g[j]);
                self.acc_with(b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes.val(a).data().to_vec(), nodes.val(b).data().to_vec());
                self.acc_with(a, |j| g[j] * bv[j]);
                self.acc_with(b, |j| g[j] * av[j]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (nodes.val(a).data().to_vec(), nodes.val(b).data().to_vec());
                self.acc_with(a, |j| g[j] / bv[j]);
                self.acc_with(b, |j| -g[j] * av[j] / (bv[j] * bv[j]));
            }
            Op::AddRow(x, b) => {
                let d = nodes.val(b).len();
                self.acc_with(x, |j| g[j]);
                if let Some(buf) = self.acc(b) {
                    for row in g.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::MulRow(x, w) => {
                let d = nodes.val(w).len();
                let (xv, wv) = (nodes.val(x).data().to_vec(), nodes.val(w).data().to_vec());
                self.acc_with(x, |j| g[j] * wv[j % d]);
                if let Some(buf) = self.acc(w) {
                    for (j, (&gv, &xj)) in g.iter().zip(&xv).enumerate() {
                        buf[j % d] += gv * xj;
                    }
                }
            }
            Op::Scale(x, s) => self.acc_with(x, |j| g[j] * s),
            Op::AddScalar(x) => self.acc_with(x, |j| g[j]),
            Op::MatMul { a, b, m, k, n } => {
                if nodes[a.0].requires_grad {
                    let bv = nodes.val(b).data().to_vec();
                    let buf = self.acc(a).unwrap();
                    T::gemm(m, n, k, g, false, &bv, true, T::one(), buf);
                }
                if nodes[b.0].requires_grad {
                    let av = nodes.val(a).data().to_vec();
                    let buf = self.acc(b).unwrap();
                    T::gemm(k, m, n, &av, true, g, false, T::one(), buf);
                }
            }
            Op::Transpose { x, batch, rows, cols } => {
                if let Some(buf) = self.acc(x) {
                    for bt in 0..batch {
                        let base = bt * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[base + r * cols + c] += g[base + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc_with(x, |j| g[j]),
            Op::Concat { ref parts, outer, inner, ref mids } => {
                let total: usize = mids.iter().sum();
                let mut offset = 0;
                for (&p, &mid) in parts.iter().zip(mids) {
                    if let Some(buf) = self.acc(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + mid) * inner];
                            buf[o * mid * inner..(o + 1) * mid * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, &v)| *s += v);
                        }
                    }
                    offset += mid;
                }
            }
            Op::Slice { x, outer, inner, mid, start, end } => {
                let w = end - start;
                if let Some(buf) = self.acc(x) {
                    for o in 0..outer {
                        let dst = &mut buf[(o * mid + start) * inner..(o * mid + end) * inner];
                        dst.iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]).for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::Exp(x) => self.acc_with(x, |j| g[j] * out[j]),
            Op::Log(x) => {
                let xv = nodes.val(x).data().to_vec();
                self.acc_with(x, |j| g[j] / xv[j]);
            }
            Op::Sqrt(x) => self.acc_with(x, |j| {
                if out[j].is_zero() {
                    T::zero()
                } else {
                    g[j] / (T::of(2.0) * out[j])
                }
            }),
            Op::Tanh(x) => self.acc_with(x, |j| g[j] * (T::one() - out[j] * out[j])),
            Op::Sigmoid(x) => self.acc_with(x, |j| g[j] * out[j] * (T::one() - out[j])),
            Op::Silu(x) => {
                let xv = nodes.val(x).data().to_vec();
                self.acc_with(x, |j| {
                    let s = sigmoid(xv[j]);
                    g[j] * (s + xv[j] * s * (T::one() - s))
                });
            }
            Op::Sum(x) => self.acc_with(x, |_| g[0]),
            Op::Mean(x) => {
                let n = T::of(nodes.val(x).len() as f64);
                self.acc_with(x, |_| g[0] / n);
            }
            Op::SumAxis { x, mid, inner, scale, .. } => {
                self.acc_with(x, |j| {
                    let o = j / (mid * inner);
                    let r = j % inner;
                    g[o * inner + r] * scale
                });
            }
            Op::LayerNorm { x, ref inv_std } => {
                let d = nodes.val(x).last_dim();
                let dn = T::of(d as f64);
                if let Some(buf) = self.acc(x) {
                    for (row, &r) in inv_std.iter().enumerate() {
                        let gs = &g[row * d..(row + 1) * d];
                        let ys = &out[row * d..(row + 1) * d];
                        let mg = gs.iter().copied().sum::<T>() / dn;
                        let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for c in 0..d {
                            buf[row * d + c] += r * (gs[c] - mg - ys[c] * mgy);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = nodes.val(x).last_dim();
                if let Some(buf) = self.acc(x) {
                    for ((bs, gs), ys) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..d {
                            bs[c] += ys[c] * (gs[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = nodes.val(x).last_dim();
                if let Some(buf) = self.acc(x) {
                    for ((bs, gs), ys) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let total = gs.iter().copied().sum::<T>();
                        for c in 0..d {
                            bs[c] += gs[c] - ys[c].exp() * total;
                        }
                    }
                }
            }
            Op::Gather { table, ref ids, row } => {
                if let Some(buf) = self.acc(table) {
                    for (n, &id) in ids.iter().enumerate() {
                        buf[id * row..(id + 1) * row]
                            .iter_mut()
                            .zip(&g[n * row..(n + 1) * row])
                            .for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::L2Normalize { x, ref inv_norm } => {
                let xv = nodes.val(x).data().to_vec();
                let d = nodes.val(x).last_dim();
                if let Some(buf) = self.acc(x) {
                    for (row, &r) in inv_norm.iter().enumerate() {
                        let xs = &xv[row * d..(row + 1) * d];
                        let gs = &g[row * d..(row + 1) * d];
                        let dot = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>();
                        let r3 = r * r * r;
                        for c in 0..d {
                            buf[row * d + c] += r * gs[c] - r3 * xs[c] * dot;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, ref probs, batch, lq, lk, d, dv, scale } => {
                let (qs, ks, vs) = (
                    nodes.val(q).data().to_vec(),
                    nodes.val(k).data().to_vec(),
                    nodes.val(v).data().to_vec(),
                );
                let mut dq = vec![T::zero(); qs.len()];
                let mut dk = vec![T::zero(); ks.len()];
                let mut dvv = vec![T::zero(); vs.len()];
                let mut dp = vec![T::zero(); lq * lk];
                for b in 0..batch {
                    let p = &probs[b * lq * lk..(b + 1) * lq * lk];
                    let go = &g[b * lq * dv..(b + 1) * lq * dv];
                    // dV = P^T dO
                    T::gemm(lk, lq, dv, p, true, go, false, T::zero(), &mut dvv[b * lk * dv..(b + 1) * lk * dv]);
                    // dP = dO V^T
                    T::gemm(lq, dv, lk, go, false, &vs[b * lk * dv..], true, T::zero(), &mut dp);
                    for (dprow, prow) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                        let dot = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                        for (x, &pv) in dprow.iter_mut().zip(prow) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    T::gemm(lq, lk, d, &dp, false, &ks[b * lk * d..], false, T::zero(), &mut dq[b * lq * d..(b + 1) * lq * d]);
                    T::gemm(lk, lq, d, &dp, true, &qs[b * lq * d..], false, T::zero(), &mut dk[b * lk * d..(b + 1) * lk * d]);
                }
                self.acc_with(q, |j| dq[j]);
                self.acc_with(k, |j| dk[j]);
                self.acc_with(v, |j| dvv[j]);
            }
            Op::TemporalShift { x, batch, time, channels, chunks } => {
                let width = channels / chunks;
                if let Some(buf) = self.acc(x) {
                    for b in 0..batch {
                        for t in 0..time {
                            for c in 0..channels {
                                let s = c / width;
                                if t + s < time {
                                    buf[(b * time + t) * channels + c] += g[(b * time + t + s) * channels + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
