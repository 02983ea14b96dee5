//! Masked-patch reconstruction pretraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig, PatchBatch};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamW, OneCycle};

pub const MASK_RATIO: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 5e-5, max_lr: 1e-3, weight_decay: 0.05, seed: 0 }
    }
}

pub struct PretrainOutcome {
    /// Backbone parameters only, all frozen.
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    /// Mean reconstruction loss of each epoch.
    pub losses: Vec<f64>,
}

/// Trains every backbone parameter to reconstruct randomly hidden patches
/// through a temporary linear decoder, then drops the decoder and freezes.
pub fn pretrain(corpus: &[Vec<f64>], cfg: &BackboneConfig, pc: &PretrainConfig) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if pc.batch_size == 0 || pc.epochs == 0 {
        return Err(Error::invalid("pretraining needs epochs and batch_size of at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::new(&mut store, &mut rng, cfg)?;
    let decoder = Linear::new(&mut store, &mut rng, "decoder", cfg.d_model, cfg.patch_len, true)?;
    let steps_per_epoch = corpus.len().div_ceil(pc.batch_size);
    let schedule = OneCycle::new(pc.lr, pc.max_lr, pc.epochs * steps_per_epoch)?;
    let mut opt = AdamW::new(pc.weight_decay);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(pc.epochs);
    let mut step = 0;
    for _ in 0..pc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(pc.batch_size) {
            let series: Vec<&[f64]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            let batch = PatchBatch::from_series(&series, cfg)?;
            let (input, weight, count) = mask_patches(&batch, &mut rng);
            let loss = {
                let g = Graph::with_params(&store);
                let mut x = backbone.embed_values(&g, input)?;
                for l in 0..backbone.layers.len() {
                    x = backbone.layer(&g, l, x, Some(&batch.mask))?;
                }
                let pred = decoder.forward(&g, x)?;
                let diff = g.sub(pred, g.constant(batch.tensor())?)?;
                let sq = g.mul(g.mul(diff, diff)?, g.constant(weight)?)?;
                let loss = g.scale(g.sum_all(sq)?, 1.0 / (count * batch.patch_len) as f32)?;
                let grads = g.backward(loss)?;
                let value = g.value(loss).item()? as f64;
                grads.write_to(&mut store);
                value
            };
            opt.update(&mut store, schedule.lr(step))?;
            step += 1;
            total += loss * chunk.len() as f64;
        }
        losses.push(total / corpus.len() as f64);
    }
    let mut out = ParamStore::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(super::PREFIX)) {
        out.add(p.name.clone(), (*p.value).clone(), false)?;
    }
    let backbone = Backbone::lookup(&out, cfg)?;
    Ok(PretrainOutcome { store: out, backbone, losses })
}

/// Zeroes `MASK_RATIO` of each series' real patches (at least one). Returns the
/// masked input, a `0/1` loss weight per value, and the number of hidden patches.
fn mask_patches(batch: &PatchBatch, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>, usize) {
    let (p, len) = (batch.patches, batch.patch_len);
    let mut input = batch.values.clone();
    let mut weight = vec![0.0f32; input.len()];
    let mut count = 0;
    for i in 0..batch.n {
        let mut real: Vec<usize> = (0..p).filter(|&j| batch.mask[i * p + j]).collect();
        real.shuffle(rng);
        let k = ((real.len() as f64 * MASK_RATIO).round() as usize).max(1);
        for &j in &real[..k] {
            let at = (i * p + j) * len;
            input[at..at + len].fill(0.0);
            weight[at..at + len].fill(1.0);
        }
        count += k;
    }
    let shape = vec![batch.n, p, len];
    (
        Tensor::new(shape.clone(), input.iter().map(|&v| v as f32).collect()).expect("shape"),
        Tensor::new(shape, weight).expect("shape"),
        count,
    )
}
