//! Per-layer forward routes over a frozen backbone.

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, PatchBatch};
use crate::data::MultiSeries;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tensor::Scalar;

use super::prompt::{attach_mask, attach_prompt, strip_prompt, PromptModule};

/// Samples of equal channel count flattened to sequences `b·C + c`.
#[derive(Clone, Debug)]
pub struct MultiBatch {
    pub inner: PatchBatch,
    pub samples: usize,
    pub channels: usize,
}

impl MultiBatch {
    pub fn new(samples: &[&MultiSeries], cfg: &BackboneConfig) -> Result<Self> {
        let channels = samples.first().ok_or_else(|| Error::invalid("empty batch"))?.channels();
        let mut series = Vec::with_capacity(samples.len() * channels);
        for s in samples {
            s.validate()?;
            if s.channels() != channels {
                return Err(Error::Data(format!(
                    "sample `{}` has {} channels, expected {channels}",
                    s.sample_id,
                    s.channels()
                )));
            }
            series.extend(s.x.iter().map(Vec::as_slice));
        }
        Ok(Self { inner: PatchBatch::from_series(&series, cfg)?, samples: samples.len(), channels })
    }

    pub fn patches(&self) -> usize {
        self.inner.patches
    }
}

/// Every channel through the backbone on its own.
pub fn channel_independent_forward<T: Scalar>(
    g: &Graph<'_, T>,
    backbone: &Backbone,
    batch: &MultiBatch,
) -> Result<Var> {
    let mut x = backbone.embed(g, &batch.inner)?;
    for l in 0..backbone.layers.len() {
        x = backbone.layer(g, l, x, Some(&batch.inner.mask))?;
    }
    Ok(x)
}

/// Before each layer, summarizes all channels with the shared prompt module,
/// prepends the summary to every channel, applies the layer, and strips it again.
/// `module = None` (prompt size zero) is plain channel independence.
pub fn gen_p_forward<T: Scalar>(
    g: &Graph<'_, T>,
    backbone: &Backbone,
    module: Option<&PromptModule>,
    batch: &MultiBatch,
) -> Result<Var> {
    let Some(module) = module else {
        return channel_independent_forward(g, backbone, batch);
    };
    let (b, c, p) = (batch.samples, batch.channels, batch.patches());
    let rows = c * module.k;
    let mask = attach_mask(&batch.inner.mask, p, rows);
    let mut x = backbone.embed(g, &batch.inner)?;
    for l in 0..backbone.layers.len() {
        let prompt = module.forward(g, x, &batch.inner.mask, b, c)?;
        let joined = attach_prompt(g, prompt, x, c)?;
        let u = backbone.layer(g, l, joined, Some(&mask))?;
        x = strip_prompt(g, u, rows)?;
    }
    Ok(x)
}

/// P-tuning v2: the same trainable `(C·K, D)` table is prepended before every layer.
pub fn ptuning_v2_forward<T: Scalar>(
    g: &Graph<'_, T>,
    backbone: &Backbone,
    table: Option<ParamId>,
    batch: &MultiBatch,
) -> Result<Var> {
    let Some(table) = table else {
        return channel_independent_forward(g, backbone, batch);
    };
    let (b, c, p) = (batch.samples, batch.channels, batch.patches());
    let t = g.param(table)?;
    let rows = g.shape(t)[0];
    if !rows.is_multiple_of(c) {
        return Err(Error::shape("ptuning_v2", format!("table of {rows} rows for {c} channels")));
    }
    let mask = attach_mask(&batch.inner.mask, p, rows);
    let mut x = backbone.embed(g, &batch.inner)?;
    for l in 0..backbone.layers.len() {
        let prompt = g.expand(t, 0, b)?;
        let joined = attach_prompt(g, prompt, x, c)?;
        let u = backbone.layer(g, l, joined, Some(&mask))?;
        x = strip_prompt(g, u, rows)?;
    }
    Ok(x)
}
