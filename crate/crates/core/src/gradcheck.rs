//! Central finite differences, used as an independent oracle for
//! [`Graph::backward`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, TaskKind, TaskSpec};
use crate::data::{MultiSeries, Target};
use crate::error::{Error, Result};
use crate::param::{normal_tensor, ParamId, ParamStore};
use crate::peft::{Aggregator, Model, MultiBatch, StrategyConfig, StrategyKind};
use crate::tensor::Tensor;

/// Step sizes outside this range are either swamped by rounding or by
/// truncation error in 64-bit arithmetic.
pub const EPS_RANGE: (f64, f64) = (1e-6, 1e-3);

/// `(f(θ + eps·e_i) − f(θ − eps·e_i)) / (2·eps)` for every scalar entry of every
/// trainable parameter.
pub fn finite_diff_grad<F>(mut loss_fn: F, store: &ParamStore<f64>, eps: f64) -> Result<Vec<(ParamId, Tensor<f64>)>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [{}, {}]", EPS_RANGE.0, EPS_RANGE.1)));
    }
    let base_a = loss_fn(store)?;
    let base_b = loss_fn(store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::invalid("loss function is not deterministic; finite differences are meaningless"));
    }
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.trainable_ids() {
        let original = Arc::clone(&store.get(id).value);
        let mut grad = Vec::with_capacity(original.len());
        for i in 0..original.len() {
            let mut plus = (*original).clone();
            plus.data_mut()[i] += eps;
            work.set_value(id, plus)?;
            let f_plus = loss_fn(&work)?;
            let mut minus = (*original).clone();
            minus.data_mut()[i] -= eps;
            work.set_value(id, minus)?;
            let f_minus = loss_fn(&work)?;
            grad.push((f_plus - f_minus) / (2.0 * eps));
        }
        work.set_value(id, (*original).clone())?;
        out.push((id, Tensor::new(original.shape().to_vec(), grad)?));
    }
    Ok(out)
}

/// Per unit of loss magnitude, gradients smaller than this are compared in
/// absolute terms. Central differences carry rounding noise of roughly
/// `machine epsilon · |loss| / eps`, far below this floor.
pub const ABS_FLOOR: f64 = 1e-6;

/// Largest deviation relative to the largest gradient magnitude of the tensor,
/// or to `floor` when that is larger.
///
/// Entries whose true gradient is tiny carry finite-difference noise that is
/// meaningless on their own scale, so the error is normalized per tensor. Some
/// gradients vanish identically (a key bias shifts every attention score of a
/// row equally), which the floor accommodates.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> f64 {
    let diff = analytic.max_abs_diff(numeric);
    let scale = analytic.data().iter().chain(numeric.data()).fold(floor, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub relative_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub params: Vec<ParamCheck>,
}

impl GradientReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.relative_error).fold(0.0, f64::max)
    }
}

/// Compares [`Graph::backward`] against central differences for a loss built by `build`.
pub fn check_gradients<F>(store: &ParamStore<f64>, eps: f64, build: F) -> Result<GradientReport>
where
    F: Fn(&Graph<'_, f64>) -> Result<Var>,
{
    let graph = Graph::with_params(store);
    let loss = build(&graph)?;
    let floor = ABS_FLOOR * graph.value(loss).item()?.abs().max(1.0);
    let grads = graph.backward(loss)?;
    let numeric = finite_diff_grad(
        |s| {
            let g = Graph::with_params(s);
            let l = build(&g)?;
            g.value(l).item()
        },
        store,
        eps,
    )?;
    let mut params = Vec::new();
    for (id, num) in numeric {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(num.shape().to_vec()));
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            relative_error: relative_error(&analytic, &num, floor),
            max_abs_grad: analytic.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        });
    }
    Ok(GradientReport { params })
}

/// Outcome of one component of [`model_suite`].
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub draws: usize,
    pub max_relative_error: f64,
    pub worst_param: String,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_relative_error < SUITE_TOLERANCE
    }
}

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_EPS: f64 = 1e-5;

/// A small architecture that keeps finite differences over every scalar cheap.
pub fn suite_backbone() -> BackboneConfig {
    BackboneConfig { d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, patch_len: 4, stride: 4, max_t: 16 }
}

fn random_batch(rng: &mut ChaCha8Rng, lengths: &[usize], channels: usize, task: &TaskSpec) -> Vec<MultiSeries> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let x = (0..channels).map(|_| (0..t).map(|_| StandardNormal.sample(rng)).collect()).collect();
            let y = match task.kind {
                TaskKind::Classify => Target::Labels((0..task.labels).map(|_| rng.random::<f64>()).collect()),
                TaskKind::Forecast => Target::Future(
                    (0..channels).map(|_| (0..task.horizon).map(|_| StandardNormal.sample(rng)).collect()).collect(),
                ),
            };
            MultiSeries { sample_id: format!("g{i}"), channel_names: vec![], x, y }
        })
        .collect()
}

/// Replaces every trainable value by a random draw so that zero-initialized
/// pieces such as LoRA's `B` are exercised too.
fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    for id in store.trainable_ids() {
        let p = store.get(id);
        let gain = p.name.ends_with(".gain");
        let mut t = normal_tensor::<f64>(rng, p.value.shape().to_vec(), 0.3);
        if gain {
            t = t.map(|v| v + 1.0);
        }
        store.set_value(id, t)?;
    }
    Ok(())
}

/// Finite-difference checks of every parameterized component, `draws` random
/// parameter and data draws each, in 64-bit precision.
pub fn model_suite(draws: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let cfg = suite_backbone();
    let classify = TaskSpec::classify(2, 2);
    let forecast = TaskSpec::forecast(2, 12, 3);
    let gen_p =
        |agg| StrategyConfig { kind: StrategyKind::GenP, k: Some(2), aggregator: agg, ..StrategyConfig::default() };
    let cases: Vec<(&str, StrategyConfig, &TaskSpec, Vec<usize>)> = vec![
        ("backbone layers + classification head", StrategyConfig::of(StrategyKind::Full), &classify, vec![12, 9, 16]),
        ("backbone layers + forecasting head", StrategyConfig::of(StrategyKind::Full), &forecast, vec![12, 12]),
        (
            "lora adapters",
            StrategyConfig { k: None, dropout: 0.0, r: 2, ..StrategyConfig::of(StrategyKind::Lora) },
            &classify,
            vec![12, 7],
        ),
        ("prompt module (transformer)", gen_p(Aggregator::Transformer), &classify, vec![12, 9, 16]),
        ("prompt module (rnn)", gen_p(Aggregator::Rnn), &classify, vec![12, 9, 16]),
        ("prompt module (mlp)", gen_p(Aggregator::Mlp), &classify, vec![12, 9, 16]),
        ("prompt module (constant)", gen_p(Aggregator::Constant), &classify, vec![12, 5]),
        (
            "p-tuning v2 table",
            StrategyConfig { k: Some(2), ..StrategyConfig::of(StrategyKind::Ptuning) },
            &forecast,
            vec![12, 12],
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (ci, (name, strategy, task, lengths)) in cases.into_iter().enumerate() {
        let mut entry =
            SuiteEntry { name: name.to_string(), draws, max_relative_error: 0.0, worst_param: String::new() };
        for draw in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64) << 32) ^ draw as u64);
            let mut store = ParamStore::<f64>::new();
            let backbone = Backbone::new(&mut store, &mut rng, &cfg)?;
            let model = Model::build(&mut store, &backbone, &strategy, task, rng.random())?;
            scramble(&mut store, &mut rng)?;
            let samples = random_batch(&mut rng, &lengths, task.channels, task);
            let refs: Vec<&MultiSeries> = samples.iter().collect();
            let batch = MultiBatch::new(&refs, &cfg)?;
            let target = crate::train::stack_targets::<f64>(&refs, task)?;
            let report = check_gradients(&store, SUITE_EPS, |g| {
                let y = model.forward(g, &batch)?;
                crate::train::task_loss(g, y, target.clone(), task)
            })?;
            for p in report.params {
                if p.relative_error >= entry.max_relative_error {
                    entry.max_relative_error = p.relative_error;
                    entry.worst_param = p.name;
                }
            }
        }
        out.push(entry);
    }
    Ok(out)
}
