//! Prediction heads over per-channel backbone outputs.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use super::patch::PatchBatch;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Forecast,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Labels M (classification).
    #[serde(default)]
    pub labels: usize,
    /// Horizon H (forecasting).
    #[serde(default)]
    pub horizon: usize,
    pub channels: usize,
    /// Input length in time steps (forecasting windows).
    #[serde(default)]
    pub lookback: Option<usize>,
}

impl TaskSpec {
    pub fn classify(channels: usize, labels: usize) -> Self {
        Self { kind: TaskKind::Classify, labels, horizon: 0, channels, lookback: None }
    }

    pub fn forecast(channels: usize, lookback: usize, horizon: usize) -> Self {
        Self { kind: TaskKind::Forecast, labels: 0, horizon, channels, lookback: Some(lookback) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("task: {m}")));
        if self.channels == 0 {
            return bad("channels must be at least 1");
        }
        match self.kind {
            TaskKind::Classify if self.labels == 0 => bad("classification needs labels >= 1"),
            TaskKind::Forecast if self.horizon == 0 => bad("forecasting needs horizon >= 1"),
            TaskKind::Forecast if self.lookback.unwrap_or(0) == 0 => bad("forecasting needs a lookback"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    /// Mean over channels, masked mean over patches, then `D -> M`.
    Classify(Linear),
    /// Mean over channels, flatten `P·D`, then `P·D -> C·H`, denormalized per channel.
    Forecast { linear: Linear, patches: usize },
}

impl Head {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        task: &TaskSpec,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        task.validate()?;
        let d = cfg.d_model;
        Ok(match task.kind {
            TaskKind::Classify => Head::Classify(Linear::new(store, rng, "head", d, task.labels, true)?),
            TaskKind::Forecast => {
                let patches = cfg.patches_for(task.lookback.unwrap_or(0));
                let linear = Linear::new(store, rng, "head", patches * d, task.channels * task.horizon, true)?;
                Head::Forecast { linear, patches }
            }
        })
    }

    pub fn linear(&self) -> &Linear {
        match self {
            Head::Classify(l) | Head::Forecast { linear: l, .. } => l,
        }
    }

    pub fn param_count(&self) -> usize {
        self.linear().param_count()
    }

    /// `u` is `(B·C, P, D)` with sequence `b·C + c`. Returns logits `(B, M)` or
    /// forecasts `(B, C, H)` in the original scale.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, u: Var, batch: &PatchBatch, channels: usize) -> Result<Var> {
        let s = g.shape(u);
        let (n, p, d) = (s[0], s[1], s[2]);
        if channels == 0 || n % channels != 0 || n != batch.n || p != batch.patches {
            return Err(Error::shape("head", format!("{s:?} for {channels} channels and batch of {}", batch.n)));
        }
        let b = n / channels;
        let per_sample = g.reshape(u, &[b, channels, p, d])?;
        let pooled = g.mean_axis(per_sample, 1)?;
        match self {
            Head::Classify(linear) => {
                let mut mask = Vec::with_capacity(b * p);
                for i in 0..b {
                    let first = &batch.mask[i * channels * p..(i * channels + 1) * p];
                    for c in 1..channels {
                        let m = &batch.mask[(i * channels + c) * p..(i * channels + c + 1) * p];
                        if m != first {
                            return Err(Error::shape("head_classify", "channels of a sample differ in patch count"));
                        }
                    }
                    mask.extend_from_slice(first);
                }
                let z = g.masked_mean(pooled, 1, Arc::from(mask))?;
                linear.forward(g, z)
            }
            Head::Forecast { linear, patches } => {
                if p != *patches || batch.mask.iter().any(|m| !m) {
                    return Err(Error::shape(
                        "head_forecast",
                        format!("expected {patches} unpadded patches per channel, got {p}"),
                    ));
                }
                let flat = g.reshape(pooled, &[b, p * d])?;
                let y = linear.forward(g, flat)?;
                let h = linear.d_out / channels;
                let y = g.reshape(y, &[b, channels, h])?;
                let (mut scale, mut shift) = (Vec::with_capacity(n * h), Vec::with_capacity(n * h));
                for state in &batch.norms {
                    let (a, c) = state.affine();
                    scale.extend(std::iter::repeat_n(T::from_f64(a), h));
                    shift.extend(std::iter::repeat_n(T::from_f64(c), h));
                }
                let scale = g.constant(Tensor::new(vec![b, channels, h], scale)?)?;
                let shift = g.constant(Tensor::new(vec![b, channels, h], shift)?)?;
                g.add(g.mul(y, scale)?, shift)
            }
        }
    }
}
