//! The univariate backbone: instance normalization, patching, a linear patch
//! embedding with learned positions, and a stack of pre-norm encoder blocks.

mod config;
mod head;
mod norm;
mod patch;
mod pretrain;

use rand::Rng;

pub use config::BackboneConfig;
pub use head::{Head, TaskKind, TaskSpec};
pub use norm::{denorm, instance_norm, NormState, NORM_EPS};
pub use patch::{patch_count, patchify, PatchBatch};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome, MASK_RATIO};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::param::{normal_tensor, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "backbone.";

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: Linear,
    pub pos: ParamId,
    pub layers: Vec<TransformerBlock>,
}

impl Backbone {
    /// Adds freshly initialized backbone parameters to `store`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = Linear::new(store, rng, "backbone.embed", cfg.patch_len, d, true)?;
        let pos = store.add("backbone.pos", normal_tensor(rng, vec![cfg.max_patches(), d], 0.02), true)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("backbone.layer{i}"), d, cfg.n_heads, cfg.d_ff))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), embed, pos, layers })
    }

    /// Resolves backbone parameters already present in `store`.
    pub fn lookup<T: Scalar>(store: &ParamStore<T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerBlock::lookup(store, &format!("backbone.layer{i}"), cfg.n_heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Linear::lookup(store, "backbone.embed")?,
            pos: store.id("backbone.pos")?,
            layers,
        })
    }

    /// Adds backbone parameters to `store` with values from `ckpt`, all frozen.
    pub fn from_checkpoint<T: Scalar>(store: &mut ParamStore<T>, ckpt: &Checkpoint) -> Result<Self> {
        let cfg: BackboneConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("manifest meta has no backbone config".into()))?,
        )?;
        for (name, t) in &ckpt.tensors {
            if !name.starts_with(PREFIX) {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}` in a backbone checkpoint")));
            }
            store.add(name.clone(), t.cast(), false)?;
        }
        Self::lookup(store, &cfg)
    }

    pub fn freeze<T: Scalar>(store: &mut ParamStore<T>) {
        store.set_trainable_prefix(PREFIX, false);
    }

    pub fn param_count(cfg: &BackboneConfig) -> usize {
        let d = cfg.d_model;
        cfg.patch_len * d + d + cfg.max_patches() * d + cfg.n_layers * TransformerBlock::param_count(d, cfg.d_ff)
    }

    /// `f_emb`: `(n, patches, d_model)` embeddings of a batch.
    pub fn embed<T: Scalar>(&self, g: &Graph<'_, T>, batch: &PatchBatch) -> Result<Var> {
        self.embed_values(g, batch.tensor())
    }

    /// Embeds already-normalized patch values `(n, patches, patch_len)`.
    pub fn embed_values<T: Scalar>(&self, g: &Graph<'_, T>, values: Tensor<T>) -> Result<Var> {
        let p = values.shape()[1];
        if p > self.cfg.max_patches() {
            return Err(Error::invalid(format!(
                "{p} patches exceed the positional table of {}",
                self.cfg.max_patches()
            )));
        }
        let x = g.constant(values)?;
        let e = self.embed.forward(g, x)?;
        let pos = g.narrow(g.param(self.pos)?, 0, 0, p)?;
        g.add(e, pos)
    }

    /// `f_ℓ` for `layer` in `0..n_layers`.
    pub fn layer<T: Scalar>(&self, g: &Graph<'_, T>, layer: usize, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let block =
            self.layers.get(layer).ok_or_else(|| Error::invalid(format!("layer {layer} of {}", self.layers.len())))?;
        let w = g.shape(x);
        if w.last() != Some(&self.cfg.d_model) {
            return Err(Error::shape("transformer_layer", format!("width of {w:?} vs d_model {}", self.cfg.d_model)));
        }
        block.forward(g, x, mask)
    }

    /// `f_L ∘ … ∘ f_1 ∘ f_emb`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, batch: &PatchBatch) -> Result<Var> {
        let mut x = self.embed(g, batch)?;
        for l in 0..self.layers.len() {
            x = self.layer(g, l, x, Some(&batch.mask))?;
        }
        Ok(x)
    }

    /// Final-layer output `(P, D)` for one series.
    pub fn forward_series(&self, store: &ParamStore<f32>, x: &[f64]) -> Result<Tensor<f32>> {
        let batch = PatchBatch::from_series(&[x], &self.cfg)?;
        let g = Graph::with_params(store);
        let u = self.forward(&g, &batch)?;
        let v = (*g.value(u)).clone();
        v.reshape(vec![batch.patches, self.cfg.d_model])
    }

    pub fn checkpoint(&self, store: &ParamStore<f32>) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "kind": "backbone",
            "config": self.cfg,
        }));
        for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(PREFIX)) {
            ckpt.tensors.push((p.name.clone(), (*p.value).clone()));
        }
        Ok(ckpt)
    }
}
