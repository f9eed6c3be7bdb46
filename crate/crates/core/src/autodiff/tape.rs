//! Reverse-mode differentiation over a flat record of tensor operations.
//!
//! Every primitive appends one node to the [`Tape`]. Because nodes are only
//! ever appended, index order is a topological order and [`Tape::backward`]
//! can sweep the record once in reverse.

use std::sync::Arc;

use super::gemm::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_offsets, broadcast_shape, row_major_strides, strided_offsets, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    ConcatLast(Var, Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        index: Arc<Vec<Option<usize>>>,
    },
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    SumAll(Var),
    /// Attention probabilities recorded by [`Tape::attention`]; not differentiated.
    AttnWeights,
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Var>,
        weights: Var,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant | Op::AttnWeights => false,
            Op::Param(_) => true,
            Op::Attention { q, k, v, mask, .. } => {
                self.rg(*q) || self.rg(*k) || self.rg(*v) || mask.is_some_and(|m| self.rg(m))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::ConcatLast(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Exp(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Softmax(x)
            | Op::SumAll(x) => self.rg(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Binds a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound.get(id.index()) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        self.bound[id.index()] = Some(v);
        v
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 && sa == out_shape.as_slice() {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else if sa == out_shape.as_slice() && out_shape.ends_with(sb) {
            da.chunks_exact(db.len())
                .flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            let oa = broadcast_offsets(&out_shape, sa);
            let ob = broadcast_offsets(&out_shape, sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    /// Batched matrix product `[..., m, k] · [..., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let plan = MatmulPlan::new(sa, sb).ok_or_else(mismatch)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if plan.flat {
            let rows = da.len() / k;
            gemm(rows, k, n, da, false, db, false, &mut out, 0.0);
        } else {
            for (i, (&ia, &ib)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &da[ia * m * k..(ia + 1) * m * k],
                    false,
                    &db[ib * k * n..(ib + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let t = Tensor::from_parts(plan.out_shape, out);
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: s.to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let (out_shape, offs) = permute_offsets(s, axes);
        let d = self.data(x);
        let data = offs.iter().map(|&o| d[o]).collect();
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "transpose needs at least two axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = wa + wb;
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks_exact(wa).zip(db.chunks_exact(wb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::ConcatLast(a, b)))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("slice axis {axis} [{start}, {})", start + len),
            });
        }
        let (outer, ext, inner) = split_axis(s, axis);
        let d = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    /// Selects positions along `axis`; `None` entries produce zeros.
    pub fn gather(&mut self, x: Var, axis: usize, index: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || index.is_empty() || index.iter().flatten().any(|&i| i >= s[axis]) {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("gather along axis {axis} with {} indices", index.len()),
            });
        }
        let (outer, ext, inner) = split_axis(s, axis);
        let d = self.data(x);
        let mut data = vec![0.0; outer * index.len() * inner];
        for o in 0..outer {
            for (j, src) in index.iter().enumerate() {
                if let Some(src) = src {
                    let from = o * ext * inner + src * inner;
                    let to = (o * index.len() + j) * inner;
                    data[to..to + inner].copy_from_slice(&d[from..from + inner]);
                }
            }
        }
        let mut out_shape = s.to_vec();
        out_shape[axis] = index.len();
        let t = Tensor::from_parts(out_shape, data);
        Ok(self.push(t, Op::Gather { x, axis, index }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, c)
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            softmax_row(row);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(t, Op::Softmax(x))
    }

    /// Multi-head scaled dot-product attention in one step.
    ///
    /// `q [..., L_q, D]`, `k [..., L_k, D]`, `v [..., L_k, D_v]` with equal
    /// leading axes; head `h` uses feature columns `h·D/K .. (h+1)·D/K`. The
    /// optional additive `mask` must broadcast to `[..., K, L_q, L_k]`.
    /// Returns the merged output `[..., L_q, D_v]` and the probabilities
    /// `[..., K, L_q, L_k]`; the latter are recorded for inspection only and
    /// carry no gradient.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>, heads: usize) -> Result<(Var, Var)> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let n = sq.len();
        let bad = |reason: &str| Error::InvalidShape {
            shape: sq.to_vec(),
            reason: format!("attention with keys {sk:?} and values {sv:?}: {reason}"),
        };
        if n < 2 || sk.len() != n || sv.len() != n || sq[..n - 2] != sk[..n - 2] || sk[..n - 1] != sv[..n - 1] {
            return Err(bad("operand shapes disagree"));
        }
        let (lq, lk, d, dv) = (sq[n - 2], sk[n - 2], sq[n - 1], sv[n - 1]);
        if sk[n - 1] != d || heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(bad("widths do not split into heads"));
        }
        let nb: usize = sq[..n - 2].iter().product();
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut wshape = sq[..n - 2].to_vec();
        wshape.extend([heads, lq, lk]);
        let moff = mask.map(|m| MaskIndex::new(&wshape, self.shape(m))).transpose()?;

        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let md = mask.map(|m| self.data(m));
        let mut p = vec![0.0; nb * heads * lq * lk];
        let mut out = vec![0.0; nb * lq * dv];
        // per-head keys and values packed as [width, L_k] so inner loops run over keys
        let (mut kt, mut vt) = (vec![0.0; dh * lk], vec![0.0; dvh * lk]);
        for b in 0..nb {
            for h in 0..heads {
                pack_head(kd, b * lk, lk, d, h * dh, dh, &mut kt);
                pack_head(vd, b * lk, lk, dv, h * dvh, dvh, &mut vt);
                for i in 0..lq {
                    let base = ((b * heads + h) * lq + i) * lk;
                    let row = &mut p[base..base + lk];
                    let qo = (b * lq + i) * d + h * dh;
                    for (c, kc) in kt.chunks_exact(lk).enumerate() {
                        let qc = qd[qo + c] * scale;
                        for (s, &kv) in row.iter_mut().zip(kc) {
                            *s += qc * kv;
                        }
                    }
                    if let (Some(md), Some(mo)) = (md, &moff) {
                        mo.add_row(md, base, row);
                    }
                    softmax_row(row);
                    let oo = (b * lq + i) * dv + h * dvh;
                    for (o, vc) in out[oo..oo + dvh].iter_mut().zip(vt.chunks_exact(lk)) {
                        *o = dot(row, vc);
                    }
                }
            }
        }
        let mut oshape = sq[..n - 1].to_vec();
        oshape.push(dv);
        let weights = self.push(Tensor::from_parts(wshape, p), Op::AttnWeights);
        let out = self.push(
            Tensor::from_parts(oshape, out),
            Op::Attention {
                q,
                k,
                v,
                mask,
                weights,
                heads,
            },
        );
        Ok((out, weights))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let a = self.abs(x);
        self.mean_all(a)
    }

    /// Signs of every ReLU and |x| input on the record, in recording order.
    ///
    /// Two evaluations of the same program with equal signatures took the same
    /// branch at every kink, so a finite difference between them is valid.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                sig.extend(self.data(x).iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    /// Propagates `d loss / d node` through the record and writes parameter
    /// gradients into `store`. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty record".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        store.zero_grads();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant | Op::AttnWeights => {}
                Op::Attention {
                    q,
                    k,
                    v,
                    mask,
                    weights,
                    heads,
                } => self.backward_attention(&mut grads, &g, [*q, *k, *v], *mask, *weights, *heads),
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Add(a, b) => {
                    let out = node.value.shape();
                    if self.rg(*a) {
                        let ga = reduce_to(&g, out, self.shape(*a));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = reduce_to(&g, out, self.shape(*b));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Sub(a, b) => {
                    let out = node.value.shape();
                    if self.rg(*a) {
                        let ga = reduce_to(&g, out, self.shape(*a));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = reduce_to(&g, out, self.shape(*b));
                        gb.iter_mut().for_each(|v| *v = -*v);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let out = node.value.shape();
                    if self.rg(*a) {
                        let prod = mul_broadcast(&g, out, self.value(*b));
                        let ga = reduce_to(&prod, out, self.shape(*a));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let prod = mul_broadcast(&g, out, self.value(*a));
                        let gb = reduce_to(&prod, out, self.shape(*b));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Div(a, b) => {
                    let out = node.value.shape();
                    let recip = self.value(*b).map(|v| 1.0 / v);
                    let g_over_b = mul_broadcast(&g, out, &recip);
                    if self.rg(*b) {
                        let mut prod = mul_broadcast(&g_over_b, out, &node.value);
                        prod.iter_mut().for_each(|v| *v = -*v);
                        let gb = reduce_to(&prod, out, self.shape(*b));
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        let ga = reduce_to(&g_over_b, out, self.shape(*a));
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::MatMul(a, b) => self.backward_matmul(&mut grads, &g, *a, *b),
                Op::Permute(x, axes) => {
                    let (_, offs) = permute_offsets(self.shape(*x), axes);
                    let mut gx = vec![0.0; g.len()];
                    for (gv, &o) in g.iter().zip(&offs) {
                        gx[o] = *gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::ConcatLast(a, b) => {
                    let wa = *self.shape(*a).last().unwrap();
                    let wb = *self.shape(*b).last().unwrap();
                    let rows = g.len() / (wa + wb);
                    let (mut ga, mut gb) = (Vec::with_capacity(rows * wa), Vec::with_capacity(rows * wb));
                    for r in g.chunks_exact(wa + wb) {
                        ga.extend_from_slice(&r[..wa]);
                        gb.extend_from_slice(&r[wa..]);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let s = self.shape(*x);
                    let (outer, ext, inner) = split_axis(s, *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![0.0; outer * ext * inner];
                    for o in 0..outer {
                        let to = o * ext * inner + start * inner;
                        let from = o * len * inner;
                        gx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { x, axis, index } => {
                    let s = self.shape(*x);
                    let (outer, ext, inner) = split_axis(s, *axis);
                    let mut gx = vec![0.0; outer * ext * inner];
                    for o in 0..outer {
                        for (j, src) in index.iter().enumerate() {
                            if let Some(src) = src {
                                let to = o * ext * inner + src * inner;
                                let from = (o * index.len() + j) * inner;
                                for (t, f) in gx[to..to + inner].iter_mut().zip(&g[from..from + inner]) {
                                    *t += f;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let gx = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(&gv, &xv)| {
                            if xv > 0.0 {
                                gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale(x, c) => {
                    let gx = g.iter().map(|&gv| gv * c).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let w = *node.value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks_exact(w).zip(y.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
            }
        }
        store.mark_grads_ready();
        Ok(())
    }

    fn backward_matmul(&self, grads: &mut [Option<Vec<f64>>], g: &[f64], a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let plan = MatmulPlan::new(sa, sb).expect("shapes validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let (da, db) = (self.data(a), self.data(b));
        if plan.flat {
            let rows = da.len() / k;
            if self.rg(a) {
                let mut ga = vec![0.0; da.len()];
                gemm(rows, n, k, g, false, db, true, &mut ga, 0.0);
                accumulate(grads, a, ga);
            }
            if self.rg(b) {
                let mut gb = vec![0.0; db.len()];
                gemm(k, rows, n, da, true, g, false, &mut gb, 0.0);
                accumulate(grads, b, gb);
            }
            return;
        }
        if self.rg(a) {
            let mut ga = vec![0.0; da.len()];
            for (i, (&ia, &ib)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &db[ib * k * n..(ib + 1) * k * n],
                    true,
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    1.0,
                );
            }
            accumulate(grads, a, ga);
        }
        if self.rg(b) {
            let mut gb = vec![0.0; db.len()];
            for (i, (&ia, &ib)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                gemm(
                    k,
                    m,
                    n,
                    &da[ia * m * k..(ia + 1) * m * k],
                    true,
                    &g[i * m * n..(i + 1) * m * n],
                    false,
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    1.0,
                );
            }
            accumulate(grads, b, gb);
        }
    }
    fn backward_attention(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        [q, k, v]: [Var; 3],
        mask: Option<Var>,
        weights: Var,
        heads: usize,
    ) {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let n = sq.len();
        let (lq, lk, d, dv) = (sq[n - 2], sk[n - 2], sq[n - 1], sv[n - 1]);
        let nb: usize = sq[..n - 2].iter().product();
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, p) = (self.data(q), self.data(k), self.data(v), self.data(weights));
        let (mut gq, mut gk, mut gv) = (vec![0.0; qd.len()], vec![0.0; kd.len()], vec![0.0; vd.len()]);
        let mask_rg = mask.is_some_and(|m| self.rg(m));
        let mut gs = if mask_rg { vec![0.0; p.len()] } else { Vec::new() };
        let mut ds = vec![0.0; lk];
        let (mut kt, mut vt) = (vec![0.0; dh * lk], vec![0.0; dvh * lk]);
        let (mut gkt, mut gvt) = (vec![0.0; dh * lk], vec![0.0; dvh * lk]);
        for b in 0..nb {
            for h in 0..heads {
                pack_head(kd, b * lk, lk, d, h * dh, dh, &mut kt);
                pack_head(vd, b * lk, lk, dv, h * dvh, dvh, &mut vt);
                gkt.fill(0.0);
                gvt.fill(0.0);
                for i in 0..lq {
                    let base = ((b * heads + h) * lq + i) * lk;
                    let prow = &p[base..base + lk];
                    let go = &g[(b * lq + i) * dv + h * dvh..][..dvh];
                    ds.fill(0.0);
                    for ((&gc, vc), gvc) in go.iter().zip(vt.chunks_exact(lk)).zip(gvt.chunks_exact_mut(lk)) {
                        for (((s, &vv), gvv), &pj) in ds.iter_mut().zip(vc).zip(gvc.iter_mut()).zip(prow) {
                            *s += gc * vv;
                            *gvv += gc * pj;
                        }
                    }
                    let acc = dot(prow, &ds);
                    for (s, &pj) in ds.iter_mut().zip(prow) {
                        *s = pj * (*s - acc);
                    }
                    if mask_rg {
                        gs[base..base + lk].copy_from_slice(&ds);
                    }
                    let qo = (b * lq + i) * d + h * dh;
                    for (c, (kc, gkc)) in kt.chunks_exact(lk).zip(gkt.chunks_exact_mut(lk)).enumerate() {
                        gq[qo + c] += scale * dot(&ds, kc);
                        let qc = scale * qd[qo + c];
                        for (t, &sj) in gkc.iter_mut().zip(&ds) {
                            *t += qc * sj;
                        }
                    }
                }
                unpack_head_add(&gkt, b * lk, lk, d, h * dh, dh, &mut gk);
                unpack_head_add(&gvt, b * lk, lk, dv, h * dvh, dvh, &mut gv);
            }
        }
        if self.rg(q) {
            accumulate(grads, q, gq);
        }
        if self.rg(k) {
            accumulate(grads, k, gk);
        }
        if self.rg(v) {
            accumulate(grads, v, gv);
        }
        if let (Some(m), true) = (mask, mask_rg) {
            let gm = reduce_to(&gs, self.shape(weights), self.shape(m));
            accumulate(grads, m, gm);
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// Right operand is a single matrix: fold all of `a`'s rows into one product.
    flat: bool,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let flat = bb.iter().all(|&e| e == 1) && batch.as_slice() == ba;
        let (a_off, b_off) = if flat {
            (Vec::new(), Vec::new())
        } else {
            (broadcast_offsets(&batch, ba), broadcast_offsets(&batch, bb))
        };
        Some(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            flat,
            a_off,
            b_off,
        })
    }
}

/// Where each attention score finds its mask entry.
enum MaskIndex {
    /// The mask matches the trailing axes: wrap around its length.
    Tail(usize),
    Offsets(Vec<usize>),
}

impl MaskIndex {
    fn new(scores: &[usize], mask: &[usize]) -> Result<Self> {
        if broadcast_shape(scores, mask).as_deref() != Some(scores) {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: scores.to_vec(),
                rhs: mask.to_vec(),
            });
        }
        let trimmed: Vec<usize> = mask.iter().copied().skip_while(|&e| e == 1).collect();
        Ok(if scores.ends_with(&trimmed) {
            MaskIndex::Tail(trimmed.iter().product())
        } else {
            MaskIndex::Offsets(broadcast_offsets(scores, mask))
        })
    }

    /// Adds the mask entries for the score row starting at flat index `base`.
    fn add_row(&self, mask: &[f64], base: usize, row: &mut [f64]) {
        let len = row.len();
        match self {
            MaskIndex::Tail(n) if n % len == 0 => {
                let start = base % n;
                for (s, m) in row.iter_mut().zip(&mask[start..start + len]) {
                    *s += m;
                }
            }
            MaskIndex::Tail(n) => {
                for (j, s) in row.iter_mut().enumerate() {
                    *s += mask[(base + j) % n];
                }
            }
            MaskIndex::Offsets(o) => {
                for (s, &k) in row.iter_mut().zip(&o[base..base + len]) {
                    *s += mask[k];
                }
            }
        }
    }
}

/// Copies columns `col..col+width` of rows `row0..row0+rows` (row length
/// `stride`) into `out` as `[width, rows]`.
fn pack_head(src: &[f64], row0: usize, rows: usize, stride: usize, col: usize, width: usize, out: &mut [f64]) {
    for j in 0..rows {
        let r = &src[(row0 + j) * stride + col..][..width];
        for (c, &v) in r.iter().enumerate() {
            out[c * rows + j] = v;
        }
    }
}

/// Inverse of [`pack_head`], adding into `dst`.
fn unpack_head_add(packed: &[f64], row0: usize, rows: usize, stride: usize, col: usize, width: usize, dst: &mut [f64]) {
    for j in 0..rows {
        let r = &mut dst[(row0 + j) * stride + col..][..width];
        for (c, v) in r.iter_mut().enumerate() {
            *v += packed[c * rows + j];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a gradient of shape `out` down to a broadcast operand of shape `target`.
fn reduce_to(g: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return g.to_vec();
    }
    let n: usize = target.iter().product();
    let mut r = vec![0.0; n];
    if n == 1 {
        r[0] = g.iter().sum();
    } else if out.ends_with(target) {
        for c in g.chunks_exact(n) {
            for (rv, gv) in r.iter_mut().zip(c) {
                *rv += gv;
            }
        }
    } else {
        for (gv, &o) in g.iter().zip(&broadcast_offsets(out, target)) {
            r[o] += gv;
        }
    }
    r
}

/// `g ⊙ broadcast(other)` where `g` has shape `out`.
fn mul_broadcast(g: &[f64], out: &[usize], other: &Tensor) -> Vec<f64> {
    let d = other.data();
    if other.shape() == out {
        g.iter().zip(d).map(|(a, b)| a * b).collect()
    } else if d.len() == 1 {
        g.iter().map(|a| a * d[0]).collect()
    } else if out.ends_with(other.shape()) {
        g.chunks_exact(d.len())
            .flat_map(|c| c.iter().zip(d).map(|(a, b)| a * b))
            .collect()
    } else {
        g.iter()
            .zip(&broadcast_offsets(out, other.shape()))
            .map(|(a, &o)| a * d[o])
            .collect()
    }
}

fn permute_offsets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let offs = strided_offsets(&out_shape, &out_strides);
    (out_shape, offs)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_oracle() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        let want = naive_matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(want, vec![19., 22., 43., 50.]);
        assert_eq!(tape.value(ab).data(), want.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn batched_matmul_broadcasts_left_matrix() {
        let mut tape = Tape::new();
        let adj = t(&[2, 2], &[0., 1., 1., 0.]);
        let h = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let a = tape.constant(adj);
        let hv = tape.constant(h.clone());
        let out = tape.matmul(a, hv).unwrap();
        assert_eq!(tape.shape(out), &[3, 2, 2]);
        // swapping rows of each batch matrix
        for bi in 0..3 {
            assert_eq!(tape.value(out).get(&[bi, 0, 1]), h.get(&[bi, 1, 1]));
            assert_eq!(tape.value(out).get(&[bi, 1, 0]), h.get(&[bi, 0, 0]));
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.softmax_last(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax_last(x);
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
        let x = tape.constant(t(&[2], &[-1e9, 0.0]));
        let y = tape.softmax_last(x);
        let d = tape.value(y).data();
        assert!(d[0] < 1e-300 && (d[0] + d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let c = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.shape(c), &[4, 8]);
        let x = tape.constant(t(&[4], &[1., -1., 2., 0.]));
        let m = tape.mean_abs(x);
        assert_eq!(tape.value(m).item(), 1.0);
        let col = tape.constant(t(&[3, 1], &[1., 2., 3.]));
        let row = tape.constant(t(&[1, 2], &[10., 20.]));
        let s = tape.add(col, row).unwrap();
        assert_eq!(tape.shape(s), &[3, 2]);
        assert_eq!(tape.value(s).data(), &[11., 21., 12., 22., 13., 23.]);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn simple_gradients() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[1], &[3.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.mean_abs(wv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &[1.0]);

        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        let unused = store.insert("unused", t(&[2], &[5.0, 5.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &[2.0, 4.0]);
        assert_eq!(store.grad(unused), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut store = ParamStore::new();
        let tape = Tape::new();
        assert!(tape.backward(Var(0), &mut store).is_err());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.backward(x, &mut store).is_err());
    }

    #[test]
    fn abs_and_relu_subgradient_at_zero() {
        let mut store = ParamStore::new();
        let w = store.insert("w", t(&[2], &[0.0, 0.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let a = tape.abs(wv);
        let r = tape.relu(wv);
        let s = tape.add(a, r).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &[0.0, 0.0]);
    }
}
