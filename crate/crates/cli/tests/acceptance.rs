//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p tsft-cli --test acceptance`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsft_core::backbone::{
    denorm, instance_norm, pretrain, Backbone, BackboneConfig, PatchBatch, PretrainOutcome, TaskSpec,
};
use tsft_core::config::PretrainBlock;
use tsft_core::data::{make_windows, split, synth_channel_mix, ChannelMixConfig, MultiSeries, Target};
use tsft_core::gradcheck::model_suite;
use tsft_core::param::normal_tensor;
use tsft_core::peft::{
    channel_independent_forward, gen_p_forward, trainable_parameters, Adapter, Aggregator, Model, MultiBatch,
    PromptModule, StrategyConfig, StrategyKind,
};
use tsft_core::train::metrics::{auprc, auroc};
use tsft_core::train::{run_cell, run_experiment, stack_targets, task_loss, AdamW, Cell, TrainConfig};
use tsft_core::{Graph, ParamStore, Scalar, Tensor};

mod tol {
    use std::time::Duration;

    /// Finite-difference step and acceptance bound for the f64 gradient suite.
    pub const GRAD_EPS: f64 = 1e-5;
    pub const GRAD_REL: f64 = 1e-4;
    pub const GRAD_DRAWS: usize = 10;
    pub const GRAD_BUDGET: Duration = Duration::from_secs(120);

    pub const REDUCTION_INPUTS: usize = 100;
    pub const REDUCTION_STEPS: usize = 50;
    pub const FROZEN_EPOCHS: usize = 10;

    /// Rank metrics against brute-force enumeration.
    pub const METRIC_ABS: f64 = 1e-12;
    pub const METRIC_INSTANCES: usize = 100;

    pub const SEPARATION_SEEDS: u64 = 5;
    pub const SEPARATION_MARGIN: f64 = 0.05;
    pub const LINEAR_AUROC_CEILING: f64 = 0.60;
    pub const SEPARATION_BUDGET: Duration = Duration::from_secs(600);

    /// Reconstruction after instance normalization, series bounded by 1e3.
    pub const DENORM_ABS: f64 = 1e-6;
    /// Valid-patch features of a padded vs. a truncated series (f32 forward).
    pub const PADDING_ABS: f32 = 1e-5;
    pub const PERMUTATION_ABS: f64 = 1e-6;
    pub const INVARIANT_BUDGET: Duration = Duration::from_secs(60);
}

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn toy() -> BackboneConfig {
    BackboneConfig::default()
}

fn frozen_backbone<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> (ParamStore<T>, Backbone) {
    let mut store = ParamStore::new();
    let b = Backbone::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), cfg).unwrap();
    Backbone::freeze(&mut store);
    (store, b)
}

fn random_series(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    normal_tensor::<f64>(rng, vec![t], 1.0).data().to_vec()
}

fn random_samples(
    rng: &mut ChaCha8Rng,
    n: usize,
    channels: usize,
    lengths: std::ops::RangeInclusive<usize>,
) -> Vec<MultiSeries> {
    (0..n)
        .map(|i| {
            let t = rng.random_range(lengths.clone());
            MultiSeries {
                sample_id: format!("s{i}"),
                channel_names: vec![],
                x: (0..channels).map(|_| random_series(rng, t)).collect(),
                y: Target::Labels(vec![if rng.random_bool(0.5) { 1.0 } else { 0.0 }]),
            }
        })
        .collect()
}

fn gen_p(aggregator: Aggregator, k: usize) -> StrategyConfig {
    StrategyConfig { kind: StrategyKind::GenP, k: Some(k), aggregator, ..StrategyConfig::default() }
}

fn pretrained() -> PretrainOutcome {
    let block = PretrainBlock::default();
    pretrain(&block.corpus().unwrap(), &toy(), &block.hyper()).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = model_suite(tol::GRAD_DRAWS, 2024).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = entries.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).unwrap();
    let detail = format!(
        "{} components × {} draws, eps {:e}, worst {} {:.2e} < {:e}, {:.1}s",
        entries.len(),
        tol::GRAD_DRAWS,
        tol::GRAD_EPS,
        worst.name,
        worst.max_relative_error,
        tol::GRAD_REL,
        elapsed.as_secs_f64()
    );
    check(entries.iter().all(|e| e.draws >= tol::GRAD_DRAWS), format!("too few draws: {detail}"))?;
    check(worst.max_relative_error < tol::GRAD_REL, detail.clone())?;
    check(elapsed < tol::GRAD_BUDGET, format!("over budget: {detail}"))?;
    Ok(detail)
}

fn zero_prompt_reduction() -> Outcome {
    let cfg = toy();
    let (base, b) = frozen_backbone::<f32>(&cfg, 1);
    let mut store = base.clone();
    let task = TaskSpec::classify(3, 1);
    let model =
        Model::build(&mut store, &b, &gen_p(Aggregator::Transformer, 0), &task, 4).map_err(|e| e.to_string())?;
    check(matches!(model.adapter, Adapter::PromptModule(None)), "K=0 built a prompt module")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..tol::REDUCTION_INPUTS {
        let n = rng.random_range(1..=3);
        let data = random_samples(&mut rng, n, 3, 1..=64);
        let refs: Vec<&MultiSeries> = data.iter().collect();
        let batch = MultiBatch::new(&refs, &cfg).unwrap();
        let g = Graph::with_params(&store);
        let genp = g.value(gen_p_forward(&g, &b, None, &batch).unwrap());
        let ci = g.value(channel_independent_forward(&g, &b, &batch).unwrap());
        let via_model = g.value(model.features(&g, &batch).unwrap());
        check(genp.bit_eq(&ci) && via_model.bit_eq(&ci), format!("input {i} differs"))?;
    }
    Ok(format!("{} random inputs bit-equal", tol::REDUCTION_INPUTS))
}

/// AdamW steps on a fixed batch; returns the model output after each step.
fn optimizer_trace(
    store: &mut ParamStore<f32>,
    model: &Model,
    batch: &MultiBatch,
    target: &Tensor<f32>,
    steps: usize,
) -> Vec<Tensor<f32>> {
    let mut opt = AdamW::new(0.05);
    let mut trace = Vec::with_capacity(steps);
    for s in 0..steps {
        {
            let g = Graph::with_params(&*store);
            let y = model.forward(&g, batch).unwrap();
            let loss = task_loss(&g, y, target.clone(), &model.task).unwrap();
            let grads = g.backward(loss).unwrap();
            drop(g);
            grads.write_to(store);
        }
        opt.update(store, 1e-3 * (1.0 + s as f64 / 10.0)).unwrap();
        let g = Graph::with_params(&*store);
        trace.push((*g.value(model.forward(&g, batch).unwrap())).clone());
    }
    trace
}

fn stores_bit_equal(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((_, p), (_, q))| p.name == q.name && p.value.bit_eq(&q.value))
}

fn constant_aggregator_reduction() -> Outcome {
    let cfg = toy();
    let (base, b) = frozen_backbone::<f32>(&cfg, 2);
    let task = TaskSpec::classify(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = random_samples(&mut rng, 8, 2, 16..=64);
    let refs: Vec<&MultiSeries> = data.iter().collect();
    let batch = MultiBatch::new(&refs, &cfg).unwrap();
    let target = stack_targets::<f32>(&refs, &task).unwrap();

    let ptuning = StrategyConfig { k: Some(4), ..StrategyConfig::of(StrategyKind::Ptuning) };
    let (mut s1, mut s2) = (base.clone(), base.clone());
    let m1 = Model::build(&mut s1, &b, &gen_p(Aggregator::Constant, 4), &task, 9).unwrap();
    let m2 = Model::build(&mut s2, &b, &ptuning, &task, 9).unwrap();
    check(stores_bit_equal(&s1, &s2), "parameters differ at init")?;
    {
        let (g1, g2) = (Graph::with_params(&s1), Graph::with_params(&s2));
        let same = g1.value(m1.forward(&g1, &batch).unwrap()).bit_eq(&g2.value(m2.forward(&g2, &batch).unwrap()));
        check(same, "outputs differ at init")?;
    }
    let t1 = optimizer_trace(&mut s1, &m1, &batch, &target, tol::REDUCTION_STEPS);
    let t2 = optimizer_trace(&mut s2, &m2, &batch, &target, tol::REDUCTION_STEPS);
    if let Some(step) = t1.iter().zip(&t2).position(|(a, c)| !a.bit_eq(c)) {
        return Err(format!("outputs diverge after step {}", step + 1));
    }
    check(stores_bit_equal(&s1, &s2), "parameters differ after training")?;
    check(!t1[0].bit_eq(&t1[tol::REDUCTION_STEPS - 1]), "training did not change the output")?;
    Ok(format!("bit-equal at init and after each of {} AdamW steps", tol::REDUCTION_STEPS))
}

fn frozen_invariance(pre: &PretrainOutcome) -> Outcome {
    let snapshot: Vec<(String, Tensor<f32>)> =
        pre.store.iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect();
    let data = synth_channel_mix(&ChannelMixConfig { n_samples: 200, seed: 3, ..ChannelMixConfig::default() }).unwrap();
    let data = split(&data, (0.6, 0.1, 0.3), 0).unwrap();
    let task = TaskSpec::classify(2, 1);
    let tc = TrainConfig { epochs: tol::FROZEN_EPOCHS, ..TrainConfig::default() };
    let strategies = [
        StrategyConfig::of(StrategyKind::Lora),
        StrategyConfig::of(StrategyKind::Linear),
        StrategyConfig::of(StrategyKind::Ptuning),
        StrategyConfig::of(StrategyKind::GenP),
    ];
    for s in &strategies {
        let cell = Cell { label: s.kind.name().into(), strategy: s.clone(), seed: 0 };
        let (_, store, _) = run_cell(&pre.store, &pre.backbone, &task, &data, &tc, &cell).map_err(|e| e.to_string())?;
        for (name, v) in &snapshot {
            let now = &store.by_name(name).unwrap().value;
            check(now.bit_eq(v), format!("{name} moved under {}", s.kind.name()))?;
        }
    }

    let mut store = pre.store.clone();
    let model = Model::build(&mut store, &pre.backbone, &StrategyConfig::of(StrategyKind::Lora), &task, 1).unwrap();
    let samples = &data.test[..8];
    let refs: Vec<&MultiSeries> = samples.iter().collect();
    let batch = MultiBatch::new(&refs, &pre.backbone.cfg).unwrap();
    let g = Graph::with_params(&store);
    let frozen = g.value(channel_independent_forward(&g, &pre.backbone, &batch).unwrap());
    check(
        g.value(model.features(&g, &batch).unwrap()).bit_eq(&frozen),
        "zero-initialized LoRA changes the forward pass",
    )?;
    Ok(format!(
        "{} backbone tensors unchanged after {} epochs of lora/linear/ptuning/gen-p; LoRA init transparent",
        snapshot.len(),
        tol::FROZEN_EPOCHS
    ))
}

fn parameter_accounting() -> Outcome {
    let cfg = toy();
    let (d, dff, l) = (cfg.d_model, cfg.d_ff, cfg.n_layers);
    let block = 4 * d + 4 * (d * d + d) + (d * dff + dff) + (dff * d + d);
    let backbone_total = cfg.patch_len * d + d + cfg.max_patches() * d + l * block;
    let (base, b) = frozen_backbone::<f32>(&cfg, 0);
    check(base.scalar_count() == backbone_total, "backbone size differs from its closed form")?;

    let (c, m, k, r) = (2, 1, 4, 1);
    let head = d * m + m;
    let kd = k * d;
    let task = TaskSpec::classify(c, m);
    let expected = [
        ("linear", StrategyConfig::of(StrategyKind::Linear), head),
        ("lora", StrategyConfig::of(StrategyKind::Lora), l * 4 * (d * r + r * d) + head),
        ("ptuning", StrategyConfig::of(StrategyKind::Ptuning), c * k * d + head),
        ("gen-p/transformer", gen_p(Aggregator::Transformer, k), 2 * block + d * kd + kd + head),
        ("gen-p/rnn", gen_p(Aggregator::Rnn, k), block + (d * kd + kd) + kd * kd + head),
        ("gen-p/mlp", gen_p(Aggregator::Mlp, k), block + cfg.max_patches() * k + k + head),
        ("gen-p/constant", gen_p(Aggregator::Constant, k), c * k * d + head),
        ("full", StrategyConfig::of(StrategyKind::Full), backbone_total + head),
    ];
    let mut counts = Vec::new();
    for (name, s, n) in expected {
        let mut store = base.clone();
        Model::build(&mut store, &b, &s, &task, 0).unwrap();
        let report = trainable_parameters(&store);
        check(report.count == n, format!("{name}: {} trainable, closed form {n}", report.count))?;
        counts.push((name, report));
    }
    let count = |name: &str| counts.iter().find(|(n, _)| *n == name).unwrap().1.count;
    check(count("linear") <= count("ptuning"), "linear > ptuning")?;
    check(count("linear") <= count("gen-p/transformer"), "linear > gen-p")?;
    let full = &counts.iter().find(|(n, _)| *n == "full").unwrap().1;
    check(full.fraction() == 1.0, format!("full fraction {}", full.fraction()))?;
    Ok(format!(
        "8 strategies match; linear {} ≤ ptuning {} and ≤ gen-p {}; full = 100%",
        count("linear"),
        count("ptuning"),
        count("gen-p/transformer")
    ))
}

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn enumerated_auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i]).count();
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / predicted.len() as f64;
        prev_recall = recall;
    }
    Some(ap)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut roc_checked, mut pr_checked, mut worst) = (0, 0, 0.0f64);
    while roc_checked < tol::METRIC_INSTANCES || pr_checked < tol::METRIC_INSTANCES {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        for (oracle, got, counter) in [
            (pairwise_auroc(&scores, &labels), auroc(&scores, &labels), &mut roc_checked),
            (enumerated_auprc(&scores, &labels), auprc(&scores, &labels), &mut pr_checked),
        ] {
            match (oracle, got) {
                (Some(e), Some(g)) => {
                    worst = worst.max((e - g).abs());
                    *counter += 1;
                }
                (None, None) => {}
                other => return Err(format!("definedness differs: {other:?}")),
            }
        }
    }
    check(worst <= tol::METRIC_ABS, format!("max deviation {worst:e}"))?;
    Ok(format!("{roc_checked} AUROC and {pr_checked} AUPRC instances, max deviation {worst:.1e}"))
}

fn channel_mixing_separation(pre: &PretrainOutcome) -> Outcome {
    let start = Instant::now();
    let all =
        synth_channel_mix(&ChannelMixConfig { n_samples: 3000, length: 64, ..ChannelMixConfig::default() }).unwrap();
    let data = split(&all, (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0), 0).unwrap();
    check((data.train.len(), data.test.len()) == (2000, 500), "unexpected split sizes")?;
    let task = TaskSpec::classify(2, 1);
    let cells: Vec<Cell> = [StrategyKind::Linear, StrategyKind::GenP]
        .into_iter()
        .flat_map(|kind| {
            (0..tol::SEPARATION_SEEDS).map(move |seed| Cell {
                label: kind.name().into(),
                strategy: StrategyConfig::of(kind),
                seed,
            })
        })
        .collect();
    let exp = run_experiment(&pre.store, &pre.backbone, &task, &data, &TrainConfig::default(), &cells, 1)
        .map_err(|e| e.to_string())?;
    check(exp.failures.is_empty(), format!("failed cells: {:?}", exp.failures))?;
    let mean = |label: &str| {
        let v: Vec<f64> = exp.results.iter().filter(|r| r.strategy == label).map(|r| r.metrics["auroc"]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (linear, genp) = (mean("linear"), mean("gen-p"));
    let elapsed = start.elapsed();
    let detail = format!(
        "AUROC gen-p {genp:.3} vs linear {linear:.3} (margin ≥ {}, linear ≤ {}), {:.0}s",
        tol::SEPARATION_MARGIN,
        tol::LINEAR_AUROC_CEILING,
        elapsed.as_secs_f64()
    );
    check(genp >= linear + tol::SEPARATION_MARGIN, detail.clone())?;
    check(linear <= tol::LINEAR_AUROC_CEILING, detail.clone())?;
    check(elapsed < tol::SEPARATION_BUDGET, format!("over budget: {detail}"))?;
    Ok(detail)
}

const BENCH_CONFIG: &str = r#"{
  "backbone": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "patch_len": 8, "stride": 8, "max_t": 64},
  "pretrain": {"corpus": {"n_series": 4, "channels": 2, "length": 128}, "epochs": 2},
  "data": {"source": {"kind": "channel-mix", "n_samples": 150, "length": 64}, "seed": 5},
  "task": {"kind": "classify", "labels": 1, "channels": 2},
  "train": {"epochs": 3}
}"#;

fn tsft(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tsft")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "tsft {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn bench_config(dir: &Path) -> String {
    let path = dir.join("bench.json");
    std::fs::write(&path, BENCH_CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

fn prompt_size_sweep() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = bench_config(dir.path());
    let out = dir.path().join("sweep");
    tsft(&["bench", "--config", &config, "--k-sweep", "1,2,4", "--seeds", "2", "--out", out.to_str().unwrap()])?;
    let text = std::fs::read_to_string(out.join("summary.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = text.lines().skip(1).collect();
    check(rows.len() == 3, format!("{} summary rows", rows.len()))?;
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let labels: BTreeSet<&str> = summary["strategies"].as_object().unwrap().keys().map(String::as_str).collect();
    check(labels == BTreeSet::from(["gen-p/k=1", "gen-p/k=2", "gen-p/k=4"]), format!("strategies {labels:?}"))?;
    let auroc: Vec<String> = labels
        .iter()
        .map(|l| format!("{l} {:.3}", summary["strategies"][*l]["auroc"]["mean"].as_f64().unwrap()))
        .collect();
    Ok(format!("3 summary rows, mean AUROC {}", auroc.join(", ")))
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn invariant_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    let mut worst_norm = 0.0f64;
    for _ in 0..500 {
        let t = rng.random_range(2..200);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let x: Vec<f64> = random_series(&mut rng, t).into_iter().map(|v| (v * scale).clamp(-1e3, 1e3)).collect();
        let (z, state) = instance_norm(&x);
        let back = denorm(&z, &state);
        worst_norm = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst_norm, f64::max);
    }
    check(worst_norm < tol::DENORM_ABS, format!("denormalization error {worst_norm:e}"))?;

    let cfg = BackboneConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 24, patch_len: 4, stride: 4, max_t: 64 };
    let (store, b) = frozen_backbone::<f32>(&cfg, 5);
    let mut worst_pad = 0.0f32;
    for trial in 0..20 {
        let long = random_series(&mut rng, 40 + trial);
        let t = rng.random_range(1..40);
        let short = random_series(&mut rng, t);
        let batch = PatchBatch::from_series(&[&long, &short], &cfg).unwrap();
        let g = Graph::with_params(&store);
        let both = g.value(b.forward(&g, &batch).unwrap());
        let alone = b.forward_series(&store, &short).unwrap();
        let rows = short.len().div_ceil(cfg.patch_len) * cfg.d_model;
        let start = batch.patches * cfg.d_model;
        worst_pad = worst_pad.max(max_abs(&both.data()[start..start + rows], alone.data()));
    }
    check(worst_pad < tol::PADDING_ABS, format!("padding leaks into valid patches: {worst_pad:e}"))?;

    let mut pstore = ParamStore::<f64>::new();
    let module = PromptModule::new(&mut pstore, &mut rng, Aggregator::Transformer, 2, 3, &cfg).unwrap();
    let (nb, nc, p, d) = (2, 3, 5, cfg.d_model);
    let x: Tensor<f64> = normal_tensor(&mut rng, vec![nb * nc, p, d], 1.0);
    let mask = vec![true; nb * nc * p];
    let prompt = |x: Tensor<f64>| {
        let g = Graph::with_params(&pstore);
        let v = g.constant(x).unwrap();
        (*g.value(module.forward(&g, v, &mask, nb, nc).unwrap())).clone()
    };
    let reference = prompt(x.clone());
    let mut worst_perm = 0.0f64;
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = vec![0.0; x.len()];
        for n in 0..nb * nc {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled[(n * p + dst) * d..(n * p + dst + 1) * d]
                    .copy_from_slice(&x.data()[(n * p + src) * d..(n * p + src + 1) * d]);
            }
        }
        worst_perm =
            worst_perm.max(prompt(Tensor::new(vec![nb * nc, p, d], shuffled).unwrap()).max_abs_diff(&reference));
    }
    check(worst_perm < tol::PERMUTATION_ABS, format!("aggregator depends on patch order: {worst_perm:e}"))?;

    let items: Vec<usize> = (0..100).collect();
    let s = split(&items, (0.6, 0.1, 0.3), 0).unwrap();
    check((s.train.len(), s.val.len(), s.test.len()) == (60, 10, 30), "100-item split is not 60/10/30")?;
    for _ in 0..200 {
        let n = rng.random_range(3..500);
        let s = split(&(0..n).collect::<Vec<_>>(), (0.6, 0.1, 0.3), rng.random()).unwrap();
        let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        check(
            all.len() == n && s.train.len() + s.val.len() + s.test.len() == n,
            format!("split of {n} is not a partition"),
        )?;
    }
    let series = |t: usize| MultiSeries {
        sample_id: "a".into(),
        channel_names: vec![],
        x: vec![vec![0.0; t]; 7],
        y: Target::None,
    };
    check(make_windows(&series(200), 104, 60, 1).unwrap().len() == 37, "200-step series does not give 37 windows")?;
    check(make_windows(&series(163), 104, 60, 1).is_err(), "too-short series was windowed")?;

    let elapsed = start.elapsed();
    check(elapsed < tol::INVARIANT_BUDGET, format!("over budget: {:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "denorm {worst_norm:.1e}, padding {worst_pad:.1e}, permutation {worst_perm:.1e}, splits and windows exact, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn bench_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = bench_config(dir.path());
    let mut summaries = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(run);
        tsft(&[
            "bench",
            "--config",
            &config,
            "--strategies",
            "linear,lora,gen-p",
            "--seeds",
            "2",
            "--jobs",
            jobs,
            "--out",
            out.to_str().unwrap(),
        ])?;
        summaries.push(std::fs::read(out.join("summary.json")).map_err(|e| e.to_string())?);
    }
    check(summaries[0] == summaries[1], "summary.json differs between runs")?;
    Ok(format!("two runs (serial and 2 jobs) wrote identical {}-byte summaries", summaries[0].len()))
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let pre = pretrained();
    let criteria: Vec<Criterion<'_>> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("exact reduction: K=0 is channel independence", Box::new(zero_prompt_reduction)),
        ("exact reduction: constant aggregator is P-tuning", Box::new(constant_aggregator_reduction)),
        ("frozen backbone invariance", Box::new(|| frozen_invariance(&pre))),
        ("parameter accounting", Box::new(parameter_accounting)),
        ("metric oracles", Box::new(metric_oracles)),
        ("channel-mixing separation", Box::new(|| channel_mixing_separation(&pre))),
        ("prompt-size sweep", Box::new(prompt_size_sweep)),
        ("invariant suite", Box::new(invariant_suite)),
        ("bench determinism", Box::new(bench_determinism)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    let total: Duration = t0.elapsed();
    println!("acceptance: {}/{} passed in {:.0}s", criteria.len() - failed, criteria.len(), total.as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
