//! Raw array kernels shared by the forward and backward passes.

use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, MatMut, MatRef};
use crate::tensor::Scalar;

/// How the right operand of a binary op maps onto the output.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    /// Both operands have the output shape.
    Same,
    /// The right operand's shape is a suffix of the left's; it repeats.
    Suffix,
    /// General broadcasting with precomputed source offsets per output element.
    General { lhs: Vec<usize>, rhs: Vec<usize> },
}

pub(crate) fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    if b.len() <= a.len() && &a[a.len() - b.len()..] == b {
        return Ok((a.to_vec(), Broadcast::Suffix));
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(Error::shape("broadcast", format!("{a:?} and {b:?} are not broadcast-compatible")));
        }
    }
    let lhs = source_offsets(&out, &pa);
    let rhs = source_offsets(&out, &pb);
    Ok((out, Broadcast::General { lhs, rhs }))
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Offset into a (broadcast) source for every element of `out`, in order.
fn source_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let strides: Vec<usize> =
        row_major_strides(src).into_iter().zip(src).map(|(s, &d)| if d == 1 { 0 } else { s }).collect();
    walk(out, &strides)
}

/// Offsets produced by walking `shape` in row-major order with `strides`.
fn walk(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

pub(crate) fn binary<T: Scalar>(a: &[T], b: &[T], out_len: usize, bc: &Broadcast, f: impl Fn(T, T) -> T) -> Vec<T> {
    match bc {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Suffix => {
            let bl = b.len();
            if bl == 0 {
                return Vec::new();
            }
            let mut out = Vec::with_capacity(out_len);
            for chunk in a.chunks(bl) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        Broadcast::General { lhs, rhs } => lhs.iter().zip(rhs).map(|(&i, &j)| f(a[i], b[j])).collect(),
    }
}

/// Sums an output-shaped gradient back onto the left operand.
pub(crate) fn reduce_lhs<T: Scalar>(g: &[T], a_len: usize, bc: &Broadcast) -> Vec<T> {
    match bc {
        Broadcast::Same | Broadcast::Suffix => g.to_vec(),
        Broadcast::General { lhs, .. } => scatter_sum(g, lhs, a_len),
    }
}

/// Sums an output-shaped gradient back onto the right operand.
pub(crate) fn reduce_rhs<T: Scalar>(g: &[T], b_len: usize, bc: &Broadcast) -> Vec<T> {
    match bc {
        Broadcast::Same => g.to_vec(),
        Broadcast::Suffix => {
            let mut out = vec![T::ZERO; b_len];
            if b_len == 0 {
                return out;
            }
            for chunk in g.chunks(b_len) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
        Broadcast::General { rhs, .. } => scatter_sum(g, rhs, b_len),
    }
}

fn scatter_sum<T: Scalar>(g: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; len];
    for (&v, &i) in g.iter().zip(map) {
        out[i] += v;
    }
    out
}

/// Gathers `data` (with `shape`) under an axis permutation.
pub(crate) fn permute<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let out = walk(&out_shape, &src).into_iter().map(|i| data[i]).collect();
    (out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// In-place softmax of one row; `keep[j] == false` forces probability zero.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], keep: Option<&[bool]>) -> Result<()> {
    let allowed = |j: usize| keep.is_none_or(|m| m[j]);
    let mut max: Option<T> = None;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            max = Some(match max {
                Some(m) => m.max(v),
                None => v,
            });
        }
    }
    let max = max.ok_or_else(|| Error::invalid("softmax row has every entry masked"))?;
    let mut sum = T::ZERO;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::ZERO;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// `dx = y * (dy - sum(dy * y))` for one softmax row.
pub(crate) fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let mut dot = T::ZERO;
    for (&a, &b) in y.iter().zip(dy) {
        dot += a * b;
    }
    for ((o, &a), &b) in dx.iter_mut().zip(y).zip(dy) {
        *o = a * (b - dot);
    }
}

/// Geometry of a fused multi-head attention over `(n, s, d)` inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::from_f64(1.0 / (self.head_dim() as f64).sqrt())
    }

    fn head_offset(&self, b: usize, h: usize) -> usize {
        b * self.s * self.d + h * self.head_dim()
    }

    fn probs_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.s * self.s
    }
}

/// Returns `(output, probabilities)`; probabilities are `(n, heads, s, s)`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    key_mask: Option<&[bool]>,
) -> Result<(Vec<T>, Vec<T>)> {
    let AttnDims { n, s, d, heads } = dims;
    let dh = dims.head_dim();
    let mut out = vec![T::ZERO; n * s * d];
    let mut probs = vec![T::ZERO; n * heads * s * s];
    for b in 0..n {
        let keep = key_mask.map(|m| &m[b * s..(b + 1) * s]);
        for h in 0..heads {
            let off = dims.head_offset(b, h);
            let poff = dims.probs_offset(b, h);
            gemm(
                dims.scale(),
                MatRef::strided(q, off, s, dh, d, 1),
                MatRef::strided(k, off, s, dh, d, 1).t(),
                T::ZERO,
                MatMut::row_major(&mut probs, poff, s, s),
            );
            for row in probs[poff..poff + s * s].chunks_mut(s) {
                softmax_row(row, keep)?;
            }
            gemm(
                T::ONE,
                MatRef::row_major(&probs, poff, s, s),
                MatRef::strided(v, off, s, dh, d, 1),
                T::ZERO,
                MatMut::strided(&mut out, off, s, dh, d, 1),
            );
        }
    }
    Ok((out, probs))
}

/// Gradients with respect to `(q, k, v)`.
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { n, s, d, heads } = dims;
    let dh = dims.head_dim();
    let scale: T = dims.scale();
    let mut dq = vec![T::ZERO; n * s * d];
    let mut dk = vec![T::ZERO; n * s * d];
    let mut dv = vec![T::ZERO; n * s * d];
    let mut dp = vec![T::ZERO; s * s];
    let mut ds = vec![T::ZERO; s * s];
    for b in 0..n {
        for h in 0..heads {
            let off = dims.head_offset(b, h);
            let poff = dims.probs_offset(b, h);
            let p = MatRef::row_major(probs, poff, s, s);
            gemm(
                T::ONE,
                MatRef::strided(dout, off, s, dh, d, 1),
                MatRef::strided(v, off, s, dh, d, 1).t(),
                T::ZERO,
                MatMut::row_major(&mut dp, 0, s, s),
            );
            for i in 0..s {
                let r = i * s..(i + 1) * s;
                softmax_row_backward(&probs[poff + i * s..poff + (i + 1) * s], &dp[r.clone()], &mut ds[r]);
            }
            gemm(
                scale,
                MatRef::row_major(&ds, 0, s, s),
                MatRef::strided(k, off, s, dh, d, 1),
                T::ZERO,
                MatMut::strided(&mut dq, off, s, dh, d, 1),
            );
            gemm(
                scale,
                MatRef::row_major(&ds, 0, s, s).t(),
                MatRef::strided(q, off, s, dh, d, 1),
                T::ZERO,
                MatMut::strided(&mut dk, off, s, dh, d, 1),
            );
            gemm(
                T::ONE,
                p.t(),
                MatRef::strided(dout, off, s, dh, d, 1),
                T::ZERO,
                MatMut::strided(&mut dv, off, s, dh, d, 1),
            );
        }
    }
    (dq, dk, dv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Numerically stable `softplus(x) = ln(1 + e^x)`.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    let pos = if x > T::ZERO { x } else { T::ZERO };
    pos + (T::ONE + (-x.abs()).exp()).ln()
}
