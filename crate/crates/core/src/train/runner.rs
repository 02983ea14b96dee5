//! Training with best-validation selection, evaluation, and multi-seed experiments.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, forecast_metrics};
use super::{AdamW, OneCycle};
use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, TaskKind, TaskSpec};
use crate::data::{DatasetSplit, MultiSeries, Target};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::peft::{trainable_parameters, Model, MultiBatch, StrategyConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_lr: f64,
    pub weight_decay: f64,
    /// One batch per epoch holding every training sample.
    pub full_batch: bool,
    /// Use a constant rate of `lr` instead of the one-cycle schedule.
    pub constant_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 5e-5,
            max_lr: 0.01,
            weight_decay: 0.05,
            full_batch: false,
            constant_lr: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Stacks sample targets into the head's output shape.
pub fn stack_targets<T: Scalar>(samples: &[&MultiSeries], task: &TaskSpec) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for s in samples {
        match (&s.y, task.kind) {
            (Target::Labels(l), TaskKind::Classify) if l.len() == task.labels => {
                data.extend(l.iter().map(|&v| T::from_f64(v)))
            }
            (Target::Future(f), TaskKind::Forecast)
                if f.len() == task.channels && f.iter().all(|r| r.len() == task.horizon) =>
            {
                data.extend(f.iter().flatten().map(|&v| T::from_f64(v)))
            }
            _ => return Err(Error::Data(format!("sample `{}` has no target matching the task", s.sample_id))),
        }
    }
    let shape = match task.kind {
        TaskKind::Classify => vec![samples.len(), task.labels],
        TaskKind::Forecast => vec![samples.len(), task.channels, task.horizon],
    };
    Tensor::new(shape, data)
}

pub fn task_loss<T: Scalar>(g: &Graph<'_, T>, out: Var, target: Tensor<T>, task: &TaskSpec) -> Result<Var> {
    match task.kind {
        TaskKind::Classify => g.bce_with_logits(out, target),
        TaskKind::Forecast => g.mse(out, target),
    }
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| s..(s + size).min(n))
}

/// Mean loss over `data`, weighted by batch size.
pub fn evaluate_loss(store: &ParamStore<f32>, model: &Model, data: &[MultiSeries], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let mut total = 0.0;
    for r in batches(data.len(), batch_size) {
        let refs: Vec<&MultiSeries> = data[r.clone()].iter().collect();
        let batch = MultiBatch::new(&refs, &model.backbone.cfg)?;
        let g = Graph::with_params(store);
        let out = model.forward(&g, &batch)?;
        let loss = task_loss(&g, out, stack_targets(&refs, &model.task)?, &model.task)?;
        total += g.value(loss).item()? as f64 * r.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Head outputs (probabilities for classification) and targets, flattened in sample order.
pub fn predict(
    store: &ParamStore<f32>,
    model: &Model,
    data: &[MultiSeries],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut out, mut tgt) = (Vec::new(), Vec::new());
    for r in batches(data.len(), batch_size) {
        let refs: Vec<&MultiSeries> = data[r].iter().collect();
        let batch = MultiBatch::new(&refs, &model.backbone.cfg)?;
        let g = Graph::with_params(store);
        let mut y = model.forward(&g, &batch)?;
        if model.task.kind == TaskKind::Classify {
            y = g.sigmoid(y)?;
        }
        out.extend(g.value(y).data().iter().map(|v| v.to_f64()));
        tgt.extend(stack_targets::<f64>(&refs, &model.task)?.into_data());
    }
    Ok((out, tgt))
}

/// Test-set metrics for the task kind.
pub fn evaluate_metrics(
    store: &ParamStore<f32>,
    model: &Model,
    data: &[MultiSeries],
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    let (out, tgt) = predict(store, model, data, batch_size)?;
    Ok(match model.task.kind {
        TaskKind::Classify => classification_metrics(&out, &tgt, model.task.labels),
        TaskKind::Forecast => forecast_metrics(&out, &tgt),
    })
}

/// Trains the store's trainable parameters; afterwards they hold the values of
/// the epoch with the lowest validation loss (training loss without a validation set).
pub fn fit(
    store: &mut ParamStore<f32>,
    model: &Model,
    train: &[MultiSeries],
    val: &[MultiSeries],
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if train.is_empty() || tc.epochs == 0 {
        return Err(Error::Config("training needs samples and at least one epoch".into()));
    }
    let batch_size = if tc.full_batch { train.len() } else { tc.batch_size.max(1) };
    let steps = tc.epochs * train.len().div_ceil(batch_size);
    let schedule = OneCycle::new(tc.lr, tc.max_lr.max(tc.lr), steps)?;
    let mut opt = AdamW::new(tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00);
    let ids = store.trainable_ids();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log =
        TrainLog { train_losses: Vec::new(), val_losses: Vec::new(), best_epoch: 0, best_val_loss: f64::INFINITY };
    let mut best = store.snapshot(&ids);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        if !tc.full_batch {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for r in batches(order.len(), batch_size) {
            let refs: Vec<&MultiSeries> = order[r.clone()].iter().map(|&i| &train[i]).collect();
            let batch = MultiBatch::new(&refs, &model.backbone.cfg)?;
            let dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64);
            let loss = {
                let g = Graph::with_params(&*store).with_dropout(dropout_rng);
                let out = model.forward(&g, &batch)?;
                let loss = task_loss(&g, out, stack_targets(&refs, &model.task)?, &model.task)?;
                let value = g.value(loss).item()? as f64;
                let grads = g.backward(loss)?;
                drop(g);
                grads.write_to(store);
                value
            };
            let lr = if tc.constant_lr { tc.lr } else { schedule.lr(step) };
            opt.update(store, lr)?;
            step += 1;
            total += loss * r.len() as f64;
        }
        log.train_losses.push(total / train.len() as f64);
        let score = if val.is_empty() {
            evaluate_loss(store, model, train, batch_size.max(64))?
        } else {
            evaluate_loss(store, model, val, batch_size.max(64))?
        };
        log.val_losses.push(score);
        if score < log.best_val_loss {
            log.best_val_loss = score;
            log.best_epoch = epoch;
            best = store.snapshot(&ids);
        }
    }
    store.restore(&ids, &best);
    store.zero_grads();
    Ok(log)
}

/// One cell of an experiment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub strategy: StrategyConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub trainable_params: usize,
    pub runtime_seconds: f64,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub strategy: String,
    pub seed: u64,
    pub error: String,
}

/// Fresh model from the cell's seed, training, and test metrics.
pub fn run_cell(
    backbone_store: &ParamStore<f32>,
    backbone: &Backbone,
    task: &TaskSpec,
    data: &DatasetSplit<MultiSeries>,
    tc: &TrainConfig,
    cell: &Cell,
) -> Result<(RunResult, ParamStore<f32>, Model)> {
    let start = Instant::now();
    let mut store = backbone_store.clone();
    let model = Model::build(&mut store, backbone, &cell.strategy, task, cell.seed)?;
    let trainable = trainable_parameters(&store).count;
    let log = fit(&mut store, &model, &data.train, &data.val, tc, cell.seed)?;
    let mut metrics = evaluate_metrics(&store, &model, &data.test, 256)?;
    metrics.insert("val_loss".into(), log.best_val_loss);
    Ok((
        RunResult {
            strategy: cell.label.clone(),
            seed: cell.seed,
            metrics,
            trainable_params: trainable,
            runtime_seconds: start.elapsed().as_secs_f64(),
            log,
        },
        store,
        model,
    ))
}

#[derive(Clone, Debug, Default)]
pub struct Experiment {
    pub results: Vec<RunResult>,
    pub failures: Vec<CellFailure>,
}

/// Runs every cell, `jobs` at a time. A failing cell is recorded and skipped.
pub fn run_experiment(
    backbone_store: &ParamStore<f32>,
    backbone: &Backbone,
    task: &TaskSpec,
    data: &DatasetSplit<MultiSeries>,
    tc: &TrainConfig,
    cells: &[Cell],
    jobs: usize,
) -> Result<Experiment> {
    let run = |cell: &Cell| run_cell(backbone_store, backbone, task, data, tc, cell).map(|(r, _, _)| r);
    let outcomes: Vec<Result<RunResult>> = if jobs <= 1 {
        cells.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(|| cells.par_iter().map(run).collect())
    };
    let mut exp = Experiment::default();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(r) => exp.results.push(r),
            Err(e) => {
                exp.failures.push(CellFailure { strategy: cell.label.clone(), seed: cell.seed, error: e.to_string() })
            }
        }
    }
    Ok(exp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// `strategy → metric → {mean, std}` with population standard deviation.
/// Wall-clock time is left out so that repeated runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub std_kind: String,
    pub strategies: BTreeMap<String, BTreeMap<String, Stat>>,
    pub trainable_params: BTreeMap<String, usize>,
    pub failures: Vec<CellFailure>,
}

pub fn summarize(exp: &Experiment, config_hash: &str) -> Summary {
    let mut values: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut params = BTreeMap::new();
    for r in &exp.results {
        let entry = values.entry(r.strategy.clone()).or_default();
        for (m, v) in &r.metrics {
            entry.entry(m.clone()).or_default().push(*v);
        }
        params.insert(r.strategy.clone(), r.trainable_params);
    }
    let strategies = values
        .into_iter()
        .map(|(s, metrics)| {
            let stats = metrics
                .into_iter()
                .map(|(m, v)| {
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
                    (m, Stat { mean, std, n: v.len() })
                })
                .collect();
            (s, stats)
        })
        .collect();
    Summary {
        config_hash: config_hash.to_string(),
        std_kind: "population".into(),
        strategies,
        trainable_params: params,
        failures: exp.failures.clone(),
    }
}

/// One row per run: `strategy,seed,trainable_params,runtime_seconds` followed by
/// every metric in name order, blank where a run lacks it.
pub fn write_results_csv(path: &std::path::Path, exp: &Experiment) -> Result<()> {
    let metrics: std::collections::BTreeSet<&String> = exp.results.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["strategy", "seed", "trainable_params", "runtime_seconds"];
    header.extend(metrics.iter().map(|m| m.as_str()));
    w.write_record(&header)?;
    for r in &exp.results {
        let mut row = vec![
            r.strategy.clone(),
            r.seed.to_string(),
            r.trainable_params.to_string(),
            format!("{:?}", r.runtime_seconds),
        ];
        row.extend(metrics.iter().map(|m| r.metrics.get(*m).map(|v| format!("{v:?}")).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
