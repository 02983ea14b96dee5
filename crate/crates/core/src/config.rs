//! The run configuration shared by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig, TaskKind, TaskSpec};
use crate::checkpoint::sha256_hex;
use crate::data::{
    impute, load_csv, make_windows, split, synth_channel_mix, synth_forecast, ChannelMixConfig, DatasetSplit,
    ForecastSynthConfig, MultiSeries, Schema,
};
use crate::error::{Error, Result};
use crate::peft::StrategyConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "TSFT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: Schema,
    },
    ChannelMix(ChannelMixConfig),
    Forecast(ForecastSynthConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Fallback for channels whose first observation is missing.
    #[serde(default)]
    pub defaults: BTreeMap<String, f64>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    /// Step between forecasting windows.
    #[serde(default = "one")]
    pub window_stride: usize,
}

fn default_split() -> [f64; 3] {
    [0.6, 0.1, 0.3]
}

fn one() -> usize {
    1
}

/// Pretraining hyperparameters and the synthetic corpus they run on. Corpus
/// series are cut per channel into segments of `segment_length` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainBlock {
    pub corpus: ForecastSynthConfig,
    pub segment_length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainBlock {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            corpus: ForecastSynthConfig { n_series: 20, channels: 4, length: 256, ..ForecastSynthConfig::default() },
            segment_length: 64,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            max_lr: p.max_lr,
            weight_decay: p.weight_decay,
            seed: p.seed,
        }
    }
}

impl PretrainBlock {
    pub fn hyper(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            max_lr: self.max_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn corpus(&self) -> Result<Vec<Vec<f64>>> {
        if self.segment_length == 0 {
            return Err(Error::Config("pretrain.segment_length must be at least 1".into()));
        }
        Ok(synth_forecast(&self.corpus)?
            .into_iter()
            .flat_map(|s| s.x)
            .flat_map(|row| row.chunks(self.segment_length).map(<[f64]>::to_vec).collect::<Vec<_>>())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainBlock,
    pub data: DataConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses strict JSON, applies the seed override from the environment, and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.data.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let DataSource::Csv { path: p, .. } = &mut cfg.data.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.task.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be at least 1".into()));
        }
        if self.data.window_stride == 0 {
            return Err(Error::Config("data.window_stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Samples ready for the task: imputed CSV rows or generated series, cut into
    /// windows for forecasting.
    pub fn load_samples(&self) -> Result<Vec<MultiSeries>> {
        let base = match &self.data.source {
            DataSource::Csv { path, schema } => load_csv(path, schema)?
                .into_iter()
                .map(|r| impute(r, &self.data.defaults))
                .collect::<Result<Vec<_>>>()?,
            DataSource::ChannelMix(c) => synth_channel_mix(&ChannelMixConfig { seed: self.data.seed, ..c.clone() })?,
            DataSource::Forecast(c) => synth_forecast(&ForecastSynthConfig { seed: self.data.seed, ..c.clone() })?,
        };
        let samples = match self.task.kind {
            TaskKind::Classify => base,
            TaskKind::Forecast => {
                let lookback =
                    self.task.lookback.ok_or_else(|| Error::Config("forecasting needs task.lookback".into()))?;
                let mut out = Vec::new();
                for s in &base {
                    out.extend(make_windows(s, lookback, self.task.horizon, self.data.window_stride)?);
                }
                out
            }
        };
        if let Some(s) = samples.iter().find(|s| s.channels() != self.task.channels) {
            return Err(Error::Config(format!(
                "sample `{}` has {} channels but task.channels is {}",
                s.sample_id,
                s.channels(),
                self.task.channels
            )));
        }
        Ok(samples)
    }

    pub fn dataset(&self) -> Result<DatasetSplit<MultiSeries>> {
        let [a, b, c] = self.data.split;
        split(&self.load_samples()?, (a, b, c), self.data.seed)
    }
}
