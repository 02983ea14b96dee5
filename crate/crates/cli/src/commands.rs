use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde_json::{json, Value};

use tsft_core::backbone::{pretrain as pretrain_backbone, Backbone};
use tsft_core::checkpoint::{content_hash, Checkpoint};
use tsft_core::config::{DataSource, RunConfig};
use tsft_core::data::{
    synth_channel_mix, synth_forecast, write_csv, ChannelMixConfig, DatasetSplit, ForecastSynthConfig, MultiSeries,
};
use tsft_core::gradcheck::{model_suite, SUITE_EPS, SUITE_TOLERANCE};
use tsft_core::peft::{trainable_parameters, Model, StrategyConfig, StrategyKind};
use tsft_core::train::{evaluate_metrics, run_cell, run_experiment, summarize, write_results_csv, Cell, Summary};
use tsft_core::ParamStore;

use crate::artifacts::{write_json, Output};
use crate::{Split, SynthKind};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const METRICS_FILE: &str = "metrics.json";
const EVAL_BATCH: usize = 256;

/// Loads a config and pins CSV paths to absolute ones so that the copy stored
/// with a run resolves from any working directory.
fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading `{}`", path.display()))?;
    if let DataSource::Csv { path: p, .. } = &mut cfg.data.source {
        *p = fs::canonicalize(&*p).with_context(|| format!("data file `{}`", p.display()))?;
    }
    Ok(cfg)
}

struct LoadedBackbone {
    store: ParamStore<f32>,
    backbone: Backbone,
    sha256: String,
    path: PathBuf,
}

fn load_backbone(dir: &Path) -> Result<LoadedBackbone> {
    let ckpt = Checkpoint::load(dir).with_context(|| format!("loading backbone `{}`", dir.display()))?;
    ensure!(
        ckpt.meta.get("kind").and_then(Value::as_str) == Some("backbone"),
        "`{}` is not a backbone checkpoint",
        dir.display()
    );
    let mut store = ParamStore::new();
    let backbone = Backbone::from_checkpoint(&mut store, &ckpt)?;
    Ok(LoadedBackbone { store, backbone, sha256: content_hash(dir)?, path: fs::canonicalize(dir)? })
}

fn check_backbone_matches(cfg: &RunConfig, b: &LoadedBackbone) -> Result<()> {
    ensure!(
        cfg.backbone == b.backbone.cfg,
        "the config's backbone block differs from the architecture stored in `{}`",
        b.path.display()
    );
    Ok(())
}

fn set_meta(ckpt: &mut Checkpoint, key: &str, value: Value) {
    if let Value::Object(m) = &mut ckpt.meta {
        m.insert(key.into(), value);
    }
}

fn pretrain_from_config(cfg: &RunConfig, out: &Path) -> Result<LoadedBackbone> {
    let corpus = cfg.pretrain.corpus()?;
    let outcome = pretrain_backbone(&corpus, &cfg.backbone, &cfg.pretrain.hyper())?;
    let mut ckpt = outcome.backbone.checkpoint(&outcome.store)?;
    set_meta(&mut ckpt, "config_hash", json!(cfg.hash()));
    set_meta(&mut ckpt, "pretrain", serde_json::to_value(&cfg.pretrain)?);
    set_meta(&mut ckpt, "losses", json!(outcome.losses));
    ckpt.save(out)?;
    Ok(LoadedBackbone {
        store: outcome.store,
        backbone: outcome.backbone,
        sha256: content_hash(out)?,
        path: fs::canonicalize(out)?,
    })
}

pub fn pretrain(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let dest = Output::dir(out)?;
    let b = pretrain_from_config(&cfg, dest.path())?;
    println!(
        "backbone: {} parameters, sha256 {}, config {}",
        Backbone::param_count(&b.backbone.cfg),
        b.sha256,
        cfg.hash()
    );
    dest.commit();
    Ok(ExitCode::SUCCESS)
}

fn split_of(data: &DatasetSplit<MultiSeries>, split: Split) -> &[MultiSeries] {
    match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
        Split::Test => &data.test,
    }
}

pub fn finetune(backbone: &Path, config: &Path, strategy: Option<&str>, seed: u64, out: &Path) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(s) = strategy {
        cfg.strategy.kind = s.parse()?;
    }
    let b = load_backbone(backbone)?;
    check_backbone_matches(&cfg, &b)?;
    let dest = Output::dir(out)?;
    let hash = cfg.hash();
    let data = cfg.dataset()?;
    let cell = Cell { label: cfg.strategy.kind.name().into(), strategy: cfg.strategy.clone(), seed };
    let (result, store, model) = run_cell(&b.store, &b.backbone, &cfg.task, &data, &cfg.train, &cell)?;

    let mut splits = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        splits.insert(split.name(), evaluate_metrics(&store, &model, split_of(&data, split), EVAL_BATCH)?);
    }
    let report = trainable_parameters(&store);
    let ckpt = Checkpoint::from_store(
        &store,
        true,
        json!({
            "kind": "strategy",
            "strategy": cfg.strategy,
            "task": cfg.task,
            "seed": seed,
            "config_hash": hash,
            "backbone": {"path": b.path, "sha256": b.sha256},
        }),
    );
    ckpt.save(dest.path())?;
    write_json(&dest.join(CONFIG_FILE), &cfg)?;
    write_json(
        &dest.join(TRAIN_LOG_FILE),
        &json!({
            "config_hash": hash,
            "strategy": cell.label,
            "seed": seed,
            "trainable_params": report.count,
            "total_params": report.total,
            "log": result.log,
        }),
    )?;
    write_json(&dest.join(METRICS_FILE), &json!({"config_hash": hash, "splits": splits}))?;
    println!(
        "{}: {} trainable of {} parameters, best epoch {}, test {}",
        cell.label,
        report.count,
        report.total,
        result.log.best_epoch,
        serde_json::to_string(&splits["test"])?
    );
    dest.commit();
    Ok(ExitCode::SUCCESS)
}

pub fn eval(run: &Path, split: Split, backbone: Option<&Path>) -> Result<ExitCode> {
    let text = fs::read_to_string(run.join(CONFIG_FILE)).with_context(|| format!("reading run `{}`", run.display()))?;
    // The stored copy is used verbatim; a seed override here would change the split.
    let cfg: RunConfig = serde_json::from_str(&text).context("parsing the stored run config")?;
    cfg.validate()?;
    let ckpt = Checkpoint::load(run)?;
    ensure!(
        ckpt.meta.get("kind").and_then(Value::as_str) == Some("strategy"),
        "`{}` is not a fine-tuned run",
        run.display()
    );
    let recorded = &ckpt.meta["backbone"];
    let path = match backbone {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(recorded["path"].as_str().ok_or_else(|| anyhow!("run has no backbone path"))?),
    };
    let mut b = load_backbone(&path)?;
    ensure!(
        recorded["sha256"].as_str() == Some(b.sha256.as_str()),
        "backbone `{}` has sha256 {} but the run was trained on {}",
        path.display(),
        b.sha256,
        recorded["sha256"]
    );
    let model = Model::rebuild_into(&mut b.store, &b.backbone, &cfg.strategy, &cfg.task)?;
    ckpt.apply_to(&mut b.store)?;
    let data = cfg.dataset()?;
    let metrics = evaluate_metrics(&b.store, &model, split_of(&data, split), EVAL_BATCH)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({"config_hash": cfg.hash(), "split": split.name(), "metrics": metrics}))?
    );
    Ok(ExitCode::SUCCESS)
}

pub struct BenchArgs<'a> {
    pub config: &'a Path,
    pub strategies: &'a [String],
    pub seeds: u64,
    pub k_sweep: &'a [usize],
    pub jobs: usize,
    pub backbone: Option<&'a Path>,
    pub out: &'a Path,
}

fn bench_cells(base: &StrategyConfig, strategies: &[String], seeds: u64, k_sweep: &[usize]) -> Result<Vec<Cell>> {
    let kinds: Vec<StrategyKind> = if strategies.is_empty() && k_sweep.is_empty() {
        StrategyKind::ALL.to_vec()
    } else {
        strategies.iter().map(|s| s.trim().parse()).collect::<tsft_core::Result<_>>()?
    };
    let mut variants: Vec<(String, StrategyConfig)> =
        kinds.into_iter().map(|kind| (kind.name().to_string(), StrategyConfig { kind, ..base.clone() })).collect();
    for &k in k_sweep {
        variants
            .push((format!("gen-p/k={k}"), StrategyConfig { kind: StrategyKind::GenP, k: Some(k), ..base.clone() }));
    }
    let labels: BTreeSet<&str> = variants.iter().map(|(l, _)| l.as_str()).collect();
    ensure!(labels.len() == variants.len(), "duplicate entries in --strategies or --k-sweep");
    ensure!(seeds > 0, "--seeds must be at least 1");
    Ok(variants
        .into_iter()
        .flat_map(|(label, strategy)| {
            (0..seeds).map(move |seed| Cell { label: label.clone(), strategy: strategy.clone(), seed })
        })
        .collect())
}

/// One row per strategy with the mean and standard deviation of every metric.
fn write_summary_csv(path: &Path, summary: &Summary) -> Result<()> {
    let metrics: BTreeSet<&String> = summary.strategies.values().flat_map(|m| m.keys()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["strategy".to_string(), "trainable_params".into(), "n".into()];
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for (name, stats) in &summary.strategies {
        let n = stats.values().map(|s| s.n).max().unwrap_or(0);
        let mut row = vec![name.clone(), summary.trainable_params[name].to_string(), n.to_string()];
        for m in &metrics {
            match stats.get(*m) {
                Some(s) => {
                    row.push(format!("{:?}", s.mean));
                    row.push(format!("{:?}", s.std));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn bench(args: BenchArgs<'_>) -> Result<ExitCode> {
    let cfg = load_config(args.config)?;
    let cells = bench_cells(&cfg.strategy, args.strategies, args.seeds, args.k_sweep)?;
    let dest = Output::dir(args.out)?;
    let hash = cfg.hash();
    let b = match args.backbone {
        Some(p) => {
            let b = load_backbone(p)?;
            check_backbone_matches(&cfg, &b)?;
            b
        }
        None => pretrain_from_config(&cfg, &dest.join("backbone"))?,
    };
    let data = cfg.dataset()?;
    let exp = run_experiment(&b.store, &b.backbone, &cfg.task, &data, &cfg.train, &cells, args.jobs.max(1))?;
    for f in &exp.failures {
        eprintln!("warning: cell {} seed {} failed: {}", f.strategy, f.seed, f.error.replace('\n', " "));
    }
    if exp.results.is_empty() {
        bail!("every cell failed");
    }
    write_results_csv(&dest.join("results.csv"), &exp)?;
    let summary = summarize(&exp, &hash);
    write_json(&dest.join("summary.json"), &summary)?;
    write_summary_csv(&dest.join("summary.csv"), &summary)?;
    write_json(
        &dest.join("bench.json"),
        &json!({
            "config_hash": hash,
            "cells": cells.iter().map(|c| json!({"label": c.label, "seed": c.seed})).collect::<Vec<_>>(),
            "backbone_sha256": b.sha256,
        }),
    )?;
    let headline = if cfg.task.kind == tsft_core::backbone::TaskKind::Classify { "auroc" } else { "mse" };
    for (name, stats) in &summary.strategies {
        if let Some(s) = stats.get(headline) {
            println!("{name:<12} {headline} {:.4} ± {:.4} (n={})", s.mean, s.std, s.n);
        }
    }
    dest.commit();
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(config: Option<&Path>, draws: usize) -> Result<ExitCode> {
    ensure!(draws > 0, "--draws must be at least 1");
    let (seed, hash) = match config {
        Some(p) => {
            let cfg = load_config(p)?;
            (cfg.data.seed, cfg.hash())
        }
        None => (0, "none".to_string()),
    };
    println!(
        "gradcheck: f64, eps {SUITE_EPS:e}, tolerance {SUITE_TOLERANCE:e}, {draws} draws, seed {seed}, config {hash}"
    );
    let entries = model_suite(draws, seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        let verdict = if e.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<12} max_rel_err {:.3e} worst {}", e.name, e.max_relative_error, e.worst_param);
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(
    kind: SynthKind,
    out: &Path,
    samples: Option<usize>,
    channels: Option<usize>,
    length: Option<usize>,
    seed: u64,
) -> Result<ExitCode> {
    let dest = Output::file(out)?;
    let data = match kind {
        SynthKind::ChannelMix => {
            let d = ChannelMixConfig::default();
            synth_channel_mix(&ChannelMixConfig {
                n_samples: samples.unwrap_or(d.n_samples),
                channels: channels.unwrap_or(d.channels),
                length: length.unwrap_or(d.length),
                seed,
                ..d
            })?
        }
        SynthKind::Forecast => {
            let d = ForecastSynthConfig::default();
            synth_forecast(&ForecastSynthConfig {
                n_series: samples.unwrap_or(d.n_series),
                channels: channels.unwrap_or(d.channels),
                length: length.unwrap_or(d.length),
                seed,
                ..d
            })?
        }
    };
    let schema = write_csv(dest.path(), &data)?;
    println!("{}", serde_json::to_string(&schema)?);
    dest.commit();
    Ok(ExitCode::SUCCESS)
}
