//! The prompt module and the helpers that move between per-channel sequences
//! and the channel-stacked layout it consumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::param::{normal_tensor, uniform_tensor, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PROMPT_PREFIX: &str = "prompt.";

/// How the module summarizes the patch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Transformer,
    Rnn,
    Mlp,
    /// Ignores its input and returns a trainable table.
    Constant,
}

/// `(B·C, P, D)` with sequence `b·C + c` to `(B·P, C, D)` with sequence `b·P + p`.
pub fn stack_channels<T: Scalar>(g: &Graph<'_, T>, x: Var, samples: usize, channels: usize) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != samples * channels {
        return Err(Error::shape("stack_channels", format!("{s:?} for {samples}x{channels}")));
    }
    let (p, d) = (s[1], s[2]);
    let y = g.reshape(x, &[samples, channels, p, d])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, &[samples * p, channels, d])
}

/// Inverse of [`stack_channels`].
pub fn unstack_channels<T: Scalar>(g: &Graph<'_, T>, x: Var, samples: usize, channels: usize) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 || samples == 0 || !s[0].is_multiple_of(samples) || s[1] != channels {
        return Err(Error::shape("unstack_channels", format!("{s:?} for {samples}x{channels}")));
    }
    let (p, d) = (s[0] / samples, s[2]);
    let y = g.reshape(x, &[samples, p, channels, d])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, &[samples * channels, p, d])
}

/// Prepends each sample's prompt `(B, C·K, D)` to every channel sequence of `x`
/// `(B·C, P, D)`, giving `(B·C, C·K + P, D)`.
pub fn attach_prompt<T: Scalar>(g: &Graph<'_, T>, prompt: Var, x: Var, channels: usize) -> Result<Var> {
    let (ps, xs) = (g.shape(prompt), g.shape(x));
    if ps.len() != 3 || xs.len() != 3 || ps[2] != xs[2] || ps[0] * channels != xs[0] {
        return Err(Error::shape("attach_prompt", format!("prompt {ps:?}, input {xs:?}, {channels} channels")));
    }
    if ps[1] == 0 {
        return Ok(x);
    }
    let per_channel = g.expand(prompt, 1, channels)?;
    let per_channel = g.reshape(per_channel, &[xs[0], ps[1], ps[2]])?;
    g.concat(&[per_channel, x], 1)
}

/// Drops the first `rows` positions of every sequence.
pub fn strip_prompt<T: Scalar>(g: &Graph<'_, T>, u: Var, rows: usize) -> Result<Var> {
    let s = g.shape(u);
    if s.len() != 3 || s[1] < rows {
        return Err(Error::shape("strip_prompt", format!("{s:?} has fewer than {rows} rows")));
    }
    if rows == 0 {
        return Ok(u);
    }
    g.narrow(u, 1, rows, s[1] - rows)
}

/// Key mask after [`attach_prompt`]: prompt rows are always attendable.
pub fn attach_mask(mask: &[bool], patches: usize, rows: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(mask.len() / patches.max(1) * (rows + patches));
    for seq in mask.chunks(patches.max(1)) {
        out.extend(std::iter::repeat_n(true, rows));
        out.extend_from_slice(seq);
    }
    out
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Step2 {
    Transformer { block: TransformerBlock, proj: Linear },
    Rnn { input: Linear, recurrent: ParamId },
    Mlp { weight: ParamId, bias: ParamId, max_patches: usize },
}

/// Maps channel-stacked features to a prompt of `C·K` rows. One instance is
/// shared by every backbone layer.
#[derive(Clone, Debug)]
pub struct PromptModule {
    pub aggregator: Aggregator,
    pub k: usize,
    pub d: usize,
    channel_block: Option<TransformerBlock>,
    step2: Option<Step2>,
    table: Option<ParamId>,
}

impl PromptModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        aggregator: Aggregator,
        k: usize,
        channels: usize,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("a prompt module needs K >= 1"));
        }
        let d = cfg.d_model;
        let kd = k * d;
        let block = |store: &mut ParamStore<T>, rng: &mut _, name: &str| {
            TransformerBlock::new(store, rng, &format!("{PROMPT_PREFIX}{name}"), d, cfg.n_heads, cfg.d_ff)
        };
        if aggregator == Aggregator::Constant {
            return Ok(Self {
                aggregator,
                k,
                d,
                channel_block: None,
                step2: None,
                table: Some(prompt_table(store, rng, channels, k, d)?),
            });
        }
        let channel_block = Some(block(store, rng, "channel")?);
        let step2 = match aggregator {
            Aggregator::Transformer => Step2::Transformer {
                block: block(store, rng, "patch")?,
                proj: Linear::new(store, rng, &format!("{PROMPT_PREFIX}proj"), d, kd, true)?,
            },
            Aggregator::Rnn => Step2::Rnn {
                input: Linear::new(store, rng, &format!("{PROMPT_PREFIX}rnn.input"), d, kd, true)?,
                recurrent: store.add(
                    format!("{PROMPT_PREFIX}rnn.recurrent"),
                    uniform_tensor(rng, vec![kd, kd], 1.0 / (kd as f64).sqrt()),
                    true,
                )?,
            },
            Aggregator::Mlp => {
                let max_patches = cfg.max_patches();
                let bound = 1.0 / (max_patches as f64).sqrt();
                Step2::Mlp {
                    weight: store.add(
                        format!("{PROMPT_PREFIX}mlp.weight"),
                        uniform_tensor(rng, vec![max_patches, k], bound),
                        true,
                    )?,
                    bias: store.add(format!("{PROMPT_PREFIX}mlp.bias"), uniform_tensor(rng, vec![k], bound), true)?,
                    max_patches,
                }
            }
            Aggregator::Constant => unreachable!(),
        };
        Ok(Self { aggregator, k, d, channel_block, step2: Some(step2), table: None })
    }

    /// `x` is `(B·C, P, D)` with key mask `mask`; returns `(B, C·K, D)` whose
    /// row `c·K + k` belongs to channel `c`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        x: Var,
        mask: &[bool],
        samples: usize,
        channels: usize,
    ) -> Result<Var> {
        if let Some(table) = self.table {
            let t = g.param(table)?;
            let rows = g.shape(t)[0];
            if rows != channels * self.k {
                return Err(Error::shape("prompt_module", format!("table has {rows} rows for {channels} channels")));
            }
            return g.expand(t, 0, samples);
        }
        let s = g.shape(x);
        let (n, p, d) = (s[0], s[1], s[2]);
        let kd = self.k * self.d;
        let channel_block = self.channel_block.as_ref().expect("non-constant module");
        let stacked = stack_channels(g, x, samples, channels)?;
        let mixed = channel_block.forward(g, stacked, None)?;
        let mixed = unstack_channels(g, mixed, samples, channels)?;
        let summary = match self.step2.as_ref().expect("non-constant module") {
            Step2::Transformer { block, proj } => {
                let h = block.forward(g, mixed, Some(mask))?;
                let h = proj.forward(g, h)?;
                g.max_axis(h, 1, Some(mask))?
            }
            Step2::Rnn { input, recurrent } => {
                let xw = input.forward(g, mixed)?;
                let w = g.param(*recurrent)?;
                let mut h: Option<Var> = None;
                for step in 0..p {
                    let xs = g.reshape(g.narrow(xw, 1, step, 1)?, &[n, kd])?;
                    let pre = match h {
                        Some(h) => g.add(xs, g.matmul(h, w)?)?,
                        None => xs,
                    };
                    let next = g.tanh(pre)?;
                    let col: Vec<bool> = (0..n).map(|i| mask[i * p + step]).collect();
                    h = Some(match h {
                        Some(prev) if col.iter().any(|m| !m) => {
                            let keep: Vec<T> = col
                                .iter()
                                .flat_map(|&m| std::iter::repeat_n(if m { T::ONE } else { T::ZERO }, kd))
                                .collect();
                            let hold: Vec<T> = keep.iter().map(|&v| T::ONE - v).collect();
                            let a = g.mul(next, g.constant(Tensor::new(vec![n, kd], keep)?)?)?;
                            let b = g.mul(prev, g.constant(Tensor::new(vec![n, kd], hold)?)?)?;
                            g.add(a, b)?
                        }
                        _ => next,
                    });
                }
                h.ok_or_else(|| Error::invalid("prompt module over zero patches"))?
            }
            Step2::Mlp { weight, bias, max_patches } => {
                if p > *max_patches {
                    return Err(Error::invalid(format!("{p} patches exceed the MLP aggregator's {max_patches}")));
                }
                let zero_pad: Vec<T> =
                    mask.iter().flat_map(|&m| std::iter::repeat_n(if m { T::ONE } else { T::ZERO }, d)).collect();
                let mut h = g.mul(mixed, g.constant(Tensor::new(vec![n, p, d], zero_pad)?)?)?;
                if p < *max_patches {
                    let pad = g.constant(Tensor::zeros(vec![n, max_patches - p, d]))?;
                    h = g.concat(&[h, pad], 1)?;
                }
                let h = g.permute(h, &[0, 2, 1])?;
                let h = g.add(g.matmul(h, g.param(*weight)?)?, g.param(*bias)?)?;
                let h = g.permute(h, &[0, 2, 1])?;
                g.reshape(h, &[n, kd])?
            }
        };
        g.reshape(summary, &[samples, channels * self.k, self.d])
    }
}

/// Trainable `(C·K, D)` prompt, drawn the same way for P-tuning v2 and the
/// constant aggregator.
pub fn prompt_table<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    channels: usize,
    k: usize,
    d: usize,
) -> Result<ParamId> {
    store.add(format!("{PROMPT_PREFIX}table"), normal_tensor(rng, vec![channels * k, d], 0.02), true)
}
