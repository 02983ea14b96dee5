use super::kernels::{self, Broadcast};
use super::{Gradients, Graph, Node, Op, Reduce, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, MatMut, MatRef};
use crate::tensor::{split_at_axis, Scalar, Tensor};

pub(super) fn run<T: Scalar>(graph: &Graph<'_, T>, loss: Var) -> Result<Gradients<T>> {
    let nodes = graph.nodes.borrow();
    let root = nodes.get(loss.0).ok_or_else(|| Error::Backward("loss does not belong to this graph".into()))?;
    if root.value.len() != 1 {
        return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", root.value.shape())));
    }
    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    if root.requires_grad {
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::ONE));
    }
    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        if nodes[i].requires_grad {
            propagate(&nodes, i, &g, &mut grads)?;
        }
        grads[i] = Some(g);
    }
    let params = graph.bound.borrow().iter().map(|(&id, &v)| (id, v)).collect();
    Ok(Gradients { grads, params })
}

struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Scalar> Acc<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn add(&mut self, v: Var, data: Vec<T>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        let t = Tensor::new(self.shape(v), data)?;
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
        Ok(())
    }
}

/// Expands the right operand of a broadcast op to the output shape.
fn expand_rhs<T: Scalar>(b: &[T], out_len: usize, bc: &Broadcast) -> Vec<T> {
    match bc {
        Broadcast::Same => b.to_vec(),
        Broadcast::Suffix => b.iter().copied().cycle().take(out_len).collect(),
        Broadcast::General { rhs, .. } => rhs.iter().map(|&i| b[i]).collect(),
    }
}

fn expand_lhs<T: Scalar>(a: &[T], bc: &Broadcast) -> Vec<T> {
    match bc {
        Broadcast::Same | Broadcast::Suffix => a.to_vec(),
        Broadcast::General { lhs, .. } => lhs.iter().map(|&i| a[i]).collect(),
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
    let node = &nodes[i];
    let gd = g.data();
    let mut acc = Acc { nodes, grads };
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let negate = matches!(node.op, Op::Sub(..));
            if acc.wants(*a) {
                let len = acc.value(*a).len();
                acc.add(*a, kernels::reduce_lhs(gd, len, bc))?;
            }
            if acc.wants(*b) {
                let len = acc.value(*b).len();
                let mut r = kernels::reduce_rhs(gd, len, bc);
                if negate {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                acc.add(*b, r)?;
            }
        }
        Op::Mul(a, b, bc) => {
            if acc.wants(*a) {
                let bv = expand_rhs(acc.value(*b).data(), gd.len(), bc);
                let prod: Vec<T> = gd.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
                let len = acc.value(*a).len();
                acc.add(*a, kernels::reduce_lhs(&prod, len, bc))?;
            }
            if acc.wants(*b) {
                let av = expand_lhs(acc.value(*a).data(), bc);
                let prod: Vec<T> = gd.iter().zip(&av).map(|(&x, &y)| x * y).collect();
                let len = acc.value(*b).len();
                acc.add(*b, kernels::reduce_rhs(&prod, len, bc))?;
            }
        }
        Op::Scale(a, c) => {
            acc.add(*a, gd.iter().map(|&v| v * *c).collect())?;
        }
        Op::MatMul { a, b, batched } => matmul_backward(&mut acc, *a, *b, *batched, gd)?,
        Op::Permute { x, axes } => {
            let inv = kernels::inverse_permutation(axes);
            let (_, data) = kernels::permute(gd, g.shape(), &inv);
            acc.add(*x, data)?;
        }
        Op::Reshape(x) => acc.add(*x, gd.to_vec())?,
        Op::Concat { parts, axis } => {
            let shape = g.shape();
            let (outer, total, inner) = split_at_axis(shape, *axis);
            let mut start = 0;
            for &p in parts {
                let n = acc.shape(p)[*axis];
                if acc.wants(p) {
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        data.extend_from_slice(&gd[base..base + n * inner]);
                    }
                    acc.add(p, data)?;
                }
                start += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = acc.shape(*x);
            let (outer, n, inner) = split_at_axis(&xs, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![T::ZERO; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            acc.add(*x, data)?;
        }
        Op::Expand { x, axis, times } => {
            let xs = acc.shape(*x);
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis..].iter().product();
            let mut data = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                let dst = &mut data[o * inner..(o + 1) * inner];
                for t in 0..*times {
                    let src = &gd[(o * times + t) * inner..(o * times + t + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            acc.add(*x, data)?;
        }
        Op::Reduce { x, axis, kind } => {
            let xs = acc.shape(*x);
            let (outer, n, inner) = split_at_axis(&xs, *axis);
            let mut data = vec![T::ZERO; outer * n * inner];
            match kind {
                Reduce::Sum | Reduce::Mean => {
                    let c = if matches!(kind, Reduce::Mean) { T::ONE / T::from_f64(n as f64) } else { T::ONE };
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for l in 0..n {
                            let dst = &mut data[(o * n + l) * inner..(o * n + l + 1) * inner];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v * c;
                            }
                        }
                    }
                }
                Reduce::MaskedMean { mask, counts } => {
                    for o in 0..outer {
                        let c = T::ONE / T::from_f64(counts[o] as f64);
                        let src = &gd[o * inner..(o + 1) * inner];
                        for l in (0..n).filter(|&l| mask[o * n + l]) {
                            let dst = &mut data[(o * n + l) * inner..(o * n + l + 1) * inner];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v * c;
                            }
                        }
                    }
                }
                Reduce::Max { argmax } => {
                    for o in 0..outer {
                        for k in 0..inner {
                            let l = argmax[o * inner + k];
                            data[(o * n + l) * inner + k] += gd[o * inner + k];
                        }
                    }
                }
            }
            acc.add(*x, data)?;
        }
        Op::SumAll(x) => {
            let len = acc.value(*x).len();
            acc.add(*x, vec![gd[0]; len])?;
        }
        Op::MeanAll(x) => {
            let len = acc.value(*x).len();
            let v = gd[0] / T::from_f64(len as f64);
            acc.add(*x, vec![v; len])?;
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let last = *node.value.shape().last().unwrap_or(&1);
            let mut data = vec![T::ZERO; y.len()];
            if last > 0 {
                for ((yr, gr), dr) in y.chunks(last).zip(gd.chunks(last)).zip(data.chunks_mut(last)) {
                    kernels::softmax_row_backward(yr, gr, dr);
                }
            }
            acc.add(*x, data)?;
        }
        Op::LayerNorm { x, inv_std } => {
            let xhat = node.value.data();
            let d = *node.value.shape().last().unwrap_or(&1);
            let n = T::from_f64(d as f64);
            let mut data = vec![T::ZERO; xhat.len()];
            for (r, ((xr, gr), dr)) in xhat.chunks(d).zip(gd.chunks(d)).zip(data.chunks_mut(d)).enumerate() {
                let sum_g: T = gr.iter().copied().sum();
                let sum_gx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                let c = inv_std[r] / n;
                for ((o, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                    *o = c * (n * gv - sum_g - xv * sum_gx);
                }
            }
            acc.add(*x, data)?;
        }
        Op::Unary(x, kind) => {
            let data: Vec<T> = match kind {
                Unary::Gelu => {
                    let xv = acc.value(*x).data();
                    gd.iter().zip(xv).map(|(&gv, &v)| gv * kernels::gelu_grad(v)).collect()
                }
                Unary::Relu => {
                    let xv = acc.value(*x).data();
                    gd.iter().zip(xv).map(|(&gv, &v)| if v > T::ZERO { gv } else { T::ZERO }).collect()
                }
                Unary::Tanh => gd.iter().zip(node.value.data()).map(|(&gv, &y)| gv * (T::ONE - y * y)).collect(),
                Unary::Sigmoid => gd.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y * (T::ONE - y)).collect(),
            };
            acc.add(*x, data)?;
        }
        Op::Attention { q, k, v, dims, probs } => {
            let (dq, dk, dv) = kernels::attention_backward(
                acc.value(*q).data(),
                acc.value(*k).data(),
                acc.value(*v).data(),
                probs,
                gd,
                *dims,
            );
            acc.add(*q, dq)?;
            acc.add(*k, dk)?;
            acc.add(*v, dv)?;
        }
        Op::BceWithLogits { logits, targets } => {
            let z = acc.value(*logits).data();
            let c = gd[0] / T::from_f64(z.len() as f64);
            let data = z.iter().zip(targets.data()).map(|(&zv, &y)| c * (kernels::sigmoid(zv) - y)).collect();
            acc.add(*logits, data)?;
        }
        Op::Mse { pred, target } => {
            let p = acc.value(*pred).data();
            let c = gd[0] * T::from_f64(2.0 / p.len() as f64);
            let data = p.iter().zip(target.data()).map(|(&pv, &t)| c * (pv - t)).collect();
            acc.add(*pred, data)?;
        }
    }
    Ok(())
}

fn matmul_backward<T: Scalar>(acc: &mut Acc<'_, T>, a: Var, b: Var, batched: bool, gd: &[T]) -> Result<()> {
    let sa = acc.shape(a);
    let sb = acc.shape(b);
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let av = acc.value(a).data();
    let bv = acc.value(b).data();
    let (want_a, want_b) = (acc.wants(a), acc.wants(b));
    let mut ga = if want_a { vec![T::ZERO; av.len()] } else { Vec::new() };
    let mut gb = if want_b { vec![T::ZERO; bv.len()] } else { Vec::new() };
    if batched {
        let batch = av.len() / (m * k);
        for i in 0..batch {
            let gview = MatRef::row_major(gd, i * m * n, m, n);
            if want_a {
                gemm(
                    T::ONE,
                    gview,
                    MatRef::row_major(bv, i * k * n, k, n).t(),
                    T::ZERO,
                    MatMut::row_major(&mut ga, i * m * k, m, k),
                );
            }
            if want_b {
                gemm(
                    T::ONE,
                    MatRef::row_major(av, i * m * k, m, k).t(),
                    gview,
                    T::ZERO,
                    MatMut::row_major(&mut gb, i * k * n, k, n),
                );
            }
        }
    } else {
        let rows = av.len() / k;
        let gview = MatRef::row_major(gd, 0, rows, n);
        if want_a {
            gemm(T::ONE, gview, MatRef::row_major(bv, 0, k, n).t(), T::ZERO, MatMut::row_major(&mut ga, 0, rows, k));
        }
        if want_b {
            gemm(T::ONE, MatRef::row_major(av, 0, rows, k).t(), gview, T::ZERO, MatMut::row_major(&mut gb, 0, k, n));
        }
    }
    if want_a {
        acc.add(a, ga)?;
    }
    if want_b {
        acc.add(b, gb)?;
    }
    Ok(())
}
