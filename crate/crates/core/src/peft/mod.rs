//! Adaptation strategies over a frozen backbone.

mod forward;
mod prompt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use forward::{channel_independent_forward, gen_p_forward, ptuning_v2_forward, MultiBatch};
pub use prompt::{
    attach_mask, attach_prompt, prompt_table, stack_channels, strip_prompt, unstack_channels, Aggregator, PromptModule,
    PROMPT_PREFIX,
};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, Head, TaskKind, TaskSpec, PREFIX as BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::nn::{Lora, LoraMode};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Scalar;

pub const LORA_PREFIX: &str = "lora.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "lora")]
    Lora,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "ptuning")]
    Ptuning,
    #[serde(rename = "gen-p")]
    GenP,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [Self::Full, Self::Lora, Self::Linear, Self::Ptuning, Self::GenP];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Lora => "lora",
            Self::Linear => "linear",
            Self::Ptuning => "ptuning",
            Self::GenP => "gen-p",
        }
    }

    pub fn uses_prompt(self) -> bool {
        matches!(self, Self::Ptuning | Self::GenP)
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown strategy `{s}` (expected full, lora, linear, ptuning, gen-p)"))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Prompt rows per channel; by default 4 for classification and 16 for forecasting.
    pub k: Option<usize>,
    pub aggregator: Aggregator,
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self { kind: StrategyKind::GenP, k: None, aggregator: Aggregator::Transformer, r: 1, alpha: 16.0, dropout: 0.1 }
    }
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn prompt_size(&self, task: &TaskSpec) -> usize {
        self.k.unwrap_or(match task.kind {
            TaskKind::Classify => 4,
            TaskKind::Forecast => 16,
        })
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Adapter {
    None,
    Lora,
    PromptTable(Option<ParamId>),
    PromptModule(Option<PromptModule>),
}

/// A backbone, an adapter, and a head, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub head: Head,
    pub task: TaskSpec,
    pub strategy: StrategyConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainableReport {
    pub count: usize,
    pub total: usize,
    pub names: Vec<String>,
}

impl TrainableReport {
    pub fn fraction(&self) -> f64 {
        self.count as f64 / self.total.max(1) as f64
    }
}

impl Model {
    /// Adds adapter and head parameters to a store that already holds `backbone`,
    /// drawing initial values from `seed`, and sets every trainable flag.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        backbone: &Backbone,
        strategy: &StrategyConfig,
        task: &TaskSpec,
        seed: u64,
    ) -> Result<Self> {
        task.validate()?;
        if task.kind == TaskKind::Forecast && task.lookback.unwrap_or(0) > backbone.cfg.max_t {
            return Err(Error::Config("lookback exceeds the backbone's max_t".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = backbone.clone();
        let cfg = backbone.cfg.clone();
        let k = strategy.prompt_size(task);
        store.set_trainable_prefix(BACKBONE_PREFIX, strategy.kind == StrategyKind::Full);
        let adapter = match strategy.kind {
            StrategyKind::Full | StrategyKind::Linear => Adapter::None,
            StrategyKind::Lora => {
                if !(0.0..1.0).contains(&strategy.dropout) {
                    return Err(Error::Config(format!("LoRA dropout {} must lie in [0, 1)", strategy.dropout)));
                }
                for (i, layer) in backbone.layers.iter_mut().enumerate() {
                    for (name, proj) in ["wq", "wk", "wv", "wo"].into_iter().zip(layer.projections_mut()) {
                        proj.lora = Some(Lora::new(
                            store,
                            &mut rng,
                            &format!("{LORA_PREFIX}layer{i}.{name}"),
                            proj.base.d_in,
                            proj.base.d_out,
                            strategy.r,
                            strategy.alpha,
                            strategy.dropout,
                        )?);
                    }
                }
                Adapter::Lora
            }
            StrategyKind::Ptuning => Adapter::PromptTable(if k == 0 {
                None
            } else {
                Some(prompt_table(store, &mut rng, task.channels, k, cfg.d_model)?)
            }),
            StrategyKind::GenP => Adapter::PromptModule(if k == 0 {
                None
            } else {
                Some(PromptModule::new(store, &mut rng, strategy.aggregator, k, task.channels, &cfg)?)
            }),
        };
        let head = Head::new(store, &mut rng, task, &cfg)?;
        Ok(Self { backbone, adapter, head, task: task.clone(), strategy: strategy.clone() })
    }

    /// Resolves a model whose parameters are all present in `store`, e.g. after
    /// loading a strategy checkpoint on top of its backbone.
    pub fn rebuild_into<T: Scalar>(
        store: &mut ParamStore<T>,
        backbone: &Backbone,
        strategy: &StrategyConfig,
        task: &TaskSpec,
    ) -> Result<Self> {
        let mut scratch = store.clone();
        let model = Self::build(&mut scratch, backbone, strategy, task, 0)?;
        for (_, p) in scratch.iter() {
            if store.id(&p.name).is_err() {
                store.add(p.name.clone(), (*p.value).clone(), p.trainable)?;
            }
            let id = store.id(&p.name)?;
            store.get_mut(id).trainable = p.trainable;
        }
        Ok(model)
    }

    /// Switches every LoRA adapter between the two evaluation orders.
    pub fn set_lora_mode(&mut self, mode: LoraMode) {
        for layer in &mut self.backbone.layers {
            for proj in layer.projections_mut() {
                if let Some(l) = proj.lora.as_mut() {
                    l.mode = mode;
                }
            }
        }
    }

    /// Per-channel final-layer features `(B·C, P, D)`.
    pub fn features<T: Scalar>(&self, g: &Graph<'_, T>, batch: &MultiBatch) -> Result<Var> {
        if batch.channels != self.task.channels {
            return Err(Error::Data(format!(
                "batch has {} channels, task expects {}",
                batch.channels, self.task.channels
            )));
        }
        match &self.adapter {
            Adapter::None | Adapter::Lora => channel_independent_forward(g, &self.backbone, batch),
            Adapter::PromptTable(t) => ptuning_v2_forward(g, &self.backbone, *t, batch),
            Adapter::PromptModule(m) => gen_p_forward(g, &self.backbone, m.as_ref(), batch),
        }
    }

    /// Logits `(B, M)` or forecasts `(B, C, H)`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, batch: &MultiBatch) -> Result<Var> {
        let u = self.features(g, batch)?;
        self.head.forward(g, u, &batch.inner, batch.channels)
    }
}

/// Count and names of the trainable scalars in `store`.
pub fn trainable_parameters<T: Scalar>(store: &ParamStore<T>) -> TrainableReport {
    TrainableReport {
        count: store.trainable_scalar_count(),
        total: store.scalar_count(),
        names: store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect(),
    }
}
