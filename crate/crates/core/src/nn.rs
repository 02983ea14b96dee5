//! Parameterized layers built from graph primitives.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{uniform_tensor, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(d_in)` for weight and bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(rng, vec![d_in, d_out], bound), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform_tensor(rng, vec![d_out], bound), true)?)
        } else {
            None
        };
        Ok(Self { weight, bias, d_in, d_out })
    }

    /// Resolves an existing layer by name.
    pub fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let shape = store.value(weight).shape().to_vec();
        let bias = store.id(&format!("{name}.bias")).ok();
        if shape.len() != 2 {
            return Err(Error::Checkpoint(format!("{name}.weight has shape {shape:?}")));
        }
        Ok(Self { weight, bias, d_in: shape[0], d_out: shape[1] })
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => g.add(y, g.param(b)?),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![d], T::ONE), true)?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![d]), true)?,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self { gain: store.id(&format!("{name}.gain"))?, shift: store.id(&format!("{name}.shift"))? })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let y = g.mul(n, g.param(self.gain)?)?;
        g.add(y, g.param(self.shift)?)
    }
}

/// How a low-rank update enters the forward pass. Both orders compute the same
/// function and differ only in rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraMode {
    /// `x W + scale · (dropout(x) A) B`
    Path,
    /// `x (W + scale · A B)`, without dropout.
    Merged,
}

/// Low-rank update `W + (alpha / r) A B` with `A: (d_in, r)` and `B: (r, d_out)`.
#[derive(Clone, Debug)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub mode: LoraMode,
}

impl Lora {
    /// `A` is uniform in `±1/sqrt(d_in)` and `B` is zero, so the wrapped layer
    /// starts out computing exactly what it did before.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} must lie in [1, {}] for a {d_in}x{d_out} weight",
                d_in.min(d_out)
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = store.add(format!("{name}.lora_a"), uniform_tensor(rng, vec![d_in, rank], bound), true)?;
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(vec![rank, d_out]), true)?;
        Ok(Self { a, b, rank, alpha, dropout, mode: LoraMode::Path })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A linear map with an optional low-rank adapter.
#[derive(Clone, Debug)]
pub struct Projection {
    pub base: Linear,
    pub lora: Option<Lora>,
}

impl Projection {
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let Some(lora) = &self.lora else {
            return self.base.forward(g, x);
        };
        let scale = T::from_f64(lora.scale());
        let (a, b) = (g.param(lora.a)?, g.param(lora.b)?);
        match lora.mode {
            LoraMode::Path => {
                let y = self.base.forward(g, x)?;
                let xd = g.dropout(x, lora.dropout)?;
                let low = g.matmul(g.matmul(xd, a)?, b)?;
                g.add(y, g.scale(low, scale)?)
            }
            LoraMode::Merged => {
                let delta = g.scale(g.matmul(a, b)?, scale)?;
                let w = g.add(g.param(self.base.weight)?, delta)?;
                let y = g.matmul(x, w)?;
                match self.base.bias {
                    Some(bias) => g.add(y, g.param(bias)?),
                    None => Ok(y),
                }
            }
        }
    }
}

/// Pre-norm encoder block: `x + Wo·attn(LN1 x)`, then `+ FF(LN2 ·)` with GELU.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub wo: Projection,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

fn plain(base: Linear) -> Projection {
    Projection { base, lora: None }
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!("width {d} is not divisible into {heads} heads")));
        }
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            wq: plain(Linear::new(store, rng, &format!("{name}.attn.wq"), d, d, true)?),
            wk: plain(Linear::new(store, rng, &format!("{name}.attn.wk"), d, d, true)?),
            wv: plain(Linear::new(store, rng, &format!("{name}.attn.wv"), d, d, true)?),
            wo: plain(Linear::new(store, rng, &format!("{name}.attn.wo"), d, d, true)?),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, d_ff, true)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), d_ff, d, true)?,
            heads,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str, heads: usize) -> Result<Self> {
        let lin = |part: &str| Linear::lookup(store, &format!("{name}.{part}"));
        Ok(Self {
            ln1: LayerNorm::lookup(store, &format!("{name}.ln1"))?,
            wq: plain(lin("attn.wq")?),
            wk: plain(lin("attn.wk")?),
            wv: plain(lin("attn.wv")?),
            wo: plain(lin("attn.wo")?),
            ln2: LayerNorm::lookup(store, &format!("{name}.ln2"))?,
            ff1: lin("ff1")?,
            ff2: lin("ff2")?,
            heads,
        })
    }

    /// Closed-form parameter count.
    pub fn param_count(d: usize, d_ff: usize) -> usize {
        4 * d + 4 * (d * d + d) + (d * d_ff + d_ff) + (d_ff * d + d)
    }

    pub fn projections_mut(&mut self) -> [&mut Projection; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    /// `x` is `(n, s, d)`; `key_mask` has `n * s` entries, `false` for padding.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let q = self.wq.forward(g, h)?;
        let k = self.wk.forward(g, h)?;
        let v = self.wv.forward(g, h)?;
        let a = g.attention(q, k, v, self.heads, key_mask)?;
        let x = g.add(x, self.wo.forward(g, a)?)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ff2.forward(g, g.gelu(self.ff1.forward(g, h)?)?)?;
        g.add(x, f)
    }
}
