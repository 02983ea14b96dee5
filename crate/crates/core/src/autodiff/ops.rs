use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, AttnDims, Broadcast};
use super::{Graph, Op, Reduce, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, MatMut, MatRef};
use crate::tensor::{split_at_axis, Scalar, Tensor};

impl<T: Scalar> Graph<'_, T> {
    fn binary_op(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (shape, bc) = kernels::broadcast(av.shape(), bv.shape())
            .map_err(|_| Error::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())))?;
        let len = shape.iter().product();
        let data = kernels::binary(av.data(), bv.data(), len, &bc, f);
        let rg = self.any_requires_grad(&[a, b]);
        self.push(name, Tensor::new(shape, data)?, make(a, b, bc), rg)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let rg = self.any_requires_grad(&[a]);
        self.push("scale", t, Op::Scale(a, c), rg)
    }

    /// `(..., m, k) @ (k, n)` with a shared right operand, or
    /// `(..., m, k) @ (..., k, n)` with matching batch dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let err = || Error::shape("matmul", format!("{sa:?} @ {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batched = sb.len() > 2;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        if batched {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for i in 0..batch {
                gemm(
                    T::ONE,
                    MatRef::row_major(av.data(), i * m * k, m, k),
                    MatRef::row_major(bv.data(), i * k * n, k, n),
                    T::ZERO,
                    MatMut::row_major(&mut out, i * m * n, m, n),
                );
            }
        } else {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            gemm(
                T::ONE,
                MatRef::row_major(av.data(), 0, rows, k),
                MatRef::row_major(bv.data(), 0, k, n),
                T::ZERO,
                MatMut::row_major(&mut out, 0, rows, n),
            );
        }
        let rg = self.any_requires_grad(&[a, b]);
        self.push("matmul", Tensor::new(out_shape, out)?, Op::MatMul { a, b, batched }, rg)
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let (shape, data) = kernels::permute(xv.data(), xv.shape(), axes);
        let rg = self.any_requires_grad(&[x]);
        self.push("permute", Tensor::new(shape, data)?, Op::Permute { x, axes: axes.to_vec() }, rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(x)).clone().reshape(shape.to_vec())?;
        let rg = self.any_requires_grad(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_requires_grad(parts);
        self.push("concat", Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, n, inner) = split_at_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.any_requires_grad(&[x]);
        self.push("narrow", Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, rg)
    }

    /// Inserts a new axis at `axis` holding `times` copies.
    pub fn expand(&self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis > s.len() {
            return Err(Error::shape("expand", format!("axis {axis} for rank {}", s.len())));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            let block = &xv.data()[o * inner..(o + 1) * inner];
            for _ in 0..times {
                data.extend_from_slice(block);
            }
        }
        let mut shape = s.to_vec();
        shape.insert(axis, times);
        let rg = self.any_requires_grad(&[x]);
        self.push("expand", Tensor::new(shape, data)?, Op::Expand { x, axis, times }, rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {s:?}")));
        }
        Ok(s)
    }

    fn reduced_shape(s: &[usize], axis: usize) -> Vec<usize> {
        let mut out = s.to_vec();
        out.remove(axis);
        out
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.sum_or_mean(x, axis, false)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.sum_or_mean(x, axis, true)
    }

    fn sum_or_mean(&self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let s = self.check_axis(name, x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_at_axis(&s, axis);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..n {
                let src = &xv.data()[(o * n + l) * inner..(o * n + l + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        if mean {
            let c = T::from_f64(n as f64);
            out.iter_mut().for_each(|v| *v /= c);
        }
        let kind = if mean { Reduce::Mean } else { Reduce::Sum };
        let rg = self.any_requires_grad(&[x]);
        self.push(name, Tensor::new(Self::reduced_shape(&s, axis), out)?, Op::Reduce { x, axis, kind }, rg)
    }

    /// Mean over `axis` of the entries whose mask is set. `mask` is indexed by
    /// `(outer, position)` where `outer` spans the axes before `axis`.
    pub fn masked_mean(&self, x: Var, axis: usize, mask: Arc<[bool]>) -> Result<Var> {
        let s = self.check_axis("masked_mean", x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_at_axis(&s, axis);
        if mask.len() != outer * n {
            return Err(Error::shape("masked_mean", format!("mask of {} for {outer}x{n}", mask.len())));
        }
        let mut counts = Vec::with_capacity(outer);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            let count = mask[o * n..(o + 1) * n].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::invalid("masked_mean over a fully masked slice"));
            }
            counts.push(count);
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in (0..n).filter(|&l| mask[o * n + l]) {
                let src = &xv.data()[(o * n + l) * inner..(o * n + l + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            let c = T::from_f64(count as f64);
            dst.iter_mut().for_each(|v| *v /= c);
        }
        let rg = self.any_requires_grad(&[x]);
        let kind = Reduce::MaskedMean { mask, counts };
        self.push("masked_mean", Tensor::new(Self::reduced_shape(&s, axis), out)?, Op::Reduce { x, axis, kind }, rg)
    }

    /// Max over `axis`, optionally restricted to positions whose mask is set.
    pub fn max_axis(&self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.check_axis("max_axis", x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_at_axis(&s, axis);
        if let Some(m) = mask {
            if m.len() != outer * n {
                return Err(Error::shape("max_axis", format!("mask of {} for {outer}x{n}", m.len())));
            }
        }
        let keep = |o: usize, l: usize| mask.is_none_or(|m| m[o * n + l]);
        let mut out = vec![T::ZERO; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best: Option<(usize, T)> = None;
                for l in (0..n).filter(|&l| keep(o, l)) {
                    let v = xv.data()[(o * n + l) * inner + i];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((l, v));
                    }
                }
                let (l, v) = best.ok_or_else(|| Error::invalid("max over a fully masked slice"))?;
                out[o * inner + i] = v;
                argmax[o * inner + i] = l;
            }
        }
        let rg = self.any_requires_grad(&[x]);
        let kind = Reduce::Max { argmax };
        self.push("max_axis", Tensor::new(Self::reduced_shape(&s, axis), out)?, Op::Reduce { x, axis, kind }, rg)
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let v: T = self.value(x).data().iter().copied().sum();
        let rg = self.any_requires_grad(&[x]);
        self.push("sum_all", Tensor::scalar(v), Op::SumAll(x), rg)
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let v = xv.data().iter().copied().sum::<T>() / T::from_f64(xv.len() as f64);
        let rg = self.any_requires_grad(&[x]);
        self.push("mean_all", Tensor::scalar(v), Op::MeanAll(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let mut t = (*self.value(x)).clone();
        let last = *t.shape().last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        if last > 0 {
            for row in t.data_mut().chunks_mut(last) {
                kernels::softmax_row(row, None)?;
            }
        }
        let rg = self.any_requires_grad(&[x]);
        self.push("softmax", t, Op::Softmax(x), rg)
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if d == 0 {
            return Err(Error::shape("layer_norm", "empty last axis"));
        }
        let eps = T::from_f64(eps);
        let n = T::from_f64(d as f64);
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let t = Tensor::new(xv.shape().to_vec(), xhat)?;
        let rg = self.any_requires_grad(&[x]);
        let op = Op::LayerNorm { x, inv_std: if rg { inv_std } else { Vec::new() } };
        self.push("layer_norm", t, op, rg)
    }

    fn unary(&self, x: Var, kind: Unary) -> Result<Var> {
        let (name, f): (&'static str, fn(T) -> T) = match kind {
            Unary::Gelu => ("gelu", kernels::gelu),
            Unary::Relu => ("relu", |v| if v > T::ZERO { v } else { T::ZERO }),
            Unary::Tanh => ("tanh", |v| v.tanh()),
            Unary::Sigmoid => ("sigmoid", kernels::sigmoid),
        };
        let t = self.value(x).map(f);
        let rg = self.any_requires_grad(&[x]);
        self.push(name, t, Op::Unary(x, kind), rg)
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// Scaled dot-product attention over `(n, s, d)` projections split into
    /// `heads` contiguous column blocks. Keys with `key_mask[b * s + j] == false`
    /// receive zero weight.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let s = qv.shape();
        if s.len() != 3 || kv.shape() != s || vv.shape() != s {
            return Err(Error::shape("attention", format!("q {:?}, k {:?}, v {:?}", s, kv.shape(), vv.shape())));
        }
        let dims = AttnDims { n: s[0], s: s[1], d: s[2], heads };
        if heads == 0 || !dims.d.is_multiple_of(heads) {
            return Err(Error::shape("attention", format!("width {} not divisible into {heads} heads", dims.d)));
        }
        if let Some(m) = key_mask {
            if m.len() != dims.n * dims.s {
                return Err(Error::shape("attention", format!("mask of {} for {}x{}", m.len(), dims.n, dims.s)));
            }
        }
        let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), dims, key_mask)?;
        let rg = self.any_requires_grad(&[q, k, v]);
        let probs = if rg { probs } else { Vec::new() };
        self.push("attention", Tensor::new(s.to_vec(), out)?, Op::Attention { q, k, v, dims, probs }, rg)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", format!("{:?} vs {:?}", lv.shape(), targets.shape())));
        }
        if lv.is_empty() {
            return Err(Error::invalid("loss over zero elements"));
        }
        if targets.data().iter().any(|&y| !(y >= T::ZERO && y <= T::ONE)) {
            return Err(Error::invalid("classification targets must lie in [0, 1]"));
        }
        let total: T = lv.data().iter().zip(targets.data()).map(|(&z, &y)| kernels::softplus(z) - z * y).sum();
        let loss = total / T::from_f64(lv.len() as f64);
        let rg = self.any_requires_grad(&[logits]);
        self.push("bce_with_logits", Tensor::scalar(loss), Op::BceWithLogits { logits, targets: Arc::new(targets) }, rg)
    }

    /// Mean squared error.
    pub fn mse(&self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        if pv.is_empty() {
            return Err(Error::invalid("loss over zero elements"));
        }
        let total: T = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let loss = total / T::from_f64(pv.len() as f64);
        let rg = self.any_requires_grad(&[pred]);
        self.push("mse", Tensor::scalar(loss), Op::Mse { pred, target: Arc::new(target) }, rg)
    }

    /// Inverted dropout; the identity unless the graph was built with a dropout RNG.
    pub fn dropout(&self, x: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::invalid(format!("dropout probability {p} must be below 1")));
        }
        let shape = self.shape(x);
        let mask = {
            let mut guard = self.dropout_rng.borrow_mut();
            let Some(rng) = guard.as_mut() else {
                return Ok(x);
            };
            let keep = T::from_f64(1.0 / (1.0 - p));
            let len: usize = shape.iter().product();
            let data: Vec<T> = (0..len).map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep }).collect();
            Tensor::new(shape, data)?
        };
        let m = self.constant(mask)?;
        self.mul(x, m)
    }
}
