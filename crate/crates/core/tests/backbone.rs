use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tsft_core::backbone::{instance_norm, Backbone, BackboneConfig, PatchBatch, TaskSpec};
use tsft_core::checkpoint::Checkpoint;
use tsft_core::data::{MultiSeries, Target};
use tsft_core::peft::{Model, MultiBatch, StrategyConfig, StrategyKind};
use tsft_core::{Graph, ParamStore, Tensor};

fn small() -> BackboneConfig {
    BackboneConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 24, patch_len: 4, stride: 4, max_t: 64 }
}

fn series(seed: u64, t: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn fresh(cfg: &BackboneConfig, seed: u64) -> (ParamStore<f32>, Backbone) {
    let mut store = ParamStore::new();
    let b = Backbone::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), cfg).unwrap();
    Backbone::freeze(&mut store);
    (store, b)
}

fn rows(t: &Tensor<f32>, seq: usize, count: usize, p: usize, d: usize) -> Vec<f32> {
    t.data()[seq * p * d..(seq * p + count) * d].to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_shape_is_patches_by_width(t in 1usize..=64, seed in 0u64..1000) {
        let cfg = small();
        let (store, b) = fresh(&cfg, 3);
        let u = b.forward_series(&store, &series(seed, t)).unwrap();
        prop_assert_eq!(u.shape(), &[t.div_ceil(cfg.patch_len), cfg.d_model][..]);
    }
}

#[test]
fn masked_padding_matches_truncated_series() {
    let cfg = small();
    let (store, b) = fresh(&cfg, 5);
    let d = cfg.d_model;
    for trial in 0..10u64 {
        let long = series(100 + trial, 40 + trial as usize);
        let short = series(200 + trial, 5 + 3 * trial as usize);
        let batch = PatchBatch::from_series(&[&long, &short], &cfg).unwrap();
        let g = Graph::with_params(&store);
        let both = g.value(b.forward(&g, &batch).unwrap());
        let alone = b.forward_series(&store, &short).unwrap();
        let p_short = short.len().div_ceil(cfg.patch_len);
        let padded = rows(&both, 1, p_short, batch.patches, d);
        let diff = padded.iter().zip(alone.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "trial {trial}: {diff}");
    }
}

#[test]
fn single_patch_attention_returns_its_value() {
    let g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut draw = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    };
    let q = g.constant(draw(vec![3, 1, 8])).unwrap();
    let k = g.constant(draw(vec![3, 1, 8])).unwrap();
    let vt = draw(vec![3, 1, 8]);
    let v = g.constant(vt.clone()).unwrap();
    let out = g.attention(q, k, v, 2, None).unwrap();
    assert!(g.value(out).max_abs_diff(&vt) < 1e-15);
}

#[test]
fn one_layer_is_embedding_then_layer_zero() {
    let cfg = BackboneConfig { n_layers: 1, ..small() };
    let (store, b) = fresh(&cfg, 11);
    let x = series(1, 30);
    let batch = PatchBatch::from_series(&[&x], &cfg).unwrap();
    let g = Graph::with_params(&store);
    let e = b.embed(&g, &batch).unwrap();
    let manual = b.layer(&g, 0, e, Some(&batch.mask)).unwrap();
    let composed = b.forward(&g, &batch).unwrap();
    assert!(g.value(manual).bit_eq(&g.value(composed)));
}

#[test]
fn repeated_forward_is_bit_identical() {
    let cfg = small();
    let (store, b) = fresh(&cfg, 2);
    let x = series(4, 50);
    assert!(b.forward_series(&store, &x).unwrap().bit_eq(&b.forward_series(&store, &x).unwrap()));
}

#[test]
fn affine_rescaling_leaves_features_unchanged() {
    let cfg = small();
    let (store, b) = fresh(&cfg, 7);
    for (i, (scale, shift)) in [(3.0, -1.0), (0.01, 100.0), (250.0, 7.5)].into_iter().enumerate() {
        let x = series(30 + i as u64, 37);
        let y: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let diff = b.forward_series(&store, &x).unwrap().max_abs_diff(&b.forward_series(&store, &y).unwrap());
        assert!(diff < 1e-5, "scale {scale}: {diff}");
    }
}

#[test]
fn embedding_with_zero_weights_is_its_bias() {
    let cfg = small();
    let (mut store, b) = fresh(&cfg, 1);
    let bias = Tensor::new(vec![cfg.d_model], (0..cfg.d_model).map(|i| i as f32 * 0.1).collect()).unwrap();
    store.set_value(b.embed.weight, Tensor::zeros(vec![cfg.patch_len, cfg.d_model])).unwrap();
    store.set_value(b.embed.bias.unwrap(), bias.clone()).unwrap();
    store.set_value(b.pos, Tensor::zeros(vec![cfg.max_patches(), cfg.d_model])).unwrap();
    let batch = PatchBatch::from_series(&[&series(0, 16)], &cfg).unwrap();
    let g = Graph::with_params(&store);
    let e = g.value(b.embed(&g, &batch).unwrap());
    assert_eq!(e.shape(), &[1, 4, cfg.d_model]);
    for row in e.data().chunks(cfg.d_model) {
        assert_eq!(row, bias.data());
    }
}

#[test]
fn normalization_round_trips() {
    for seed in 0..50 {
        let x: Vec<f64> = series(seed, 1 + seed as usize).iter().map(|v| 4.0 * v - 2.0).collect();
        let (z, state) = instance_norm(&x);
        if x.len() > 1 {
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            assert!(mean.abs() < 1e-6);
        }
        let back = tsft_core::backbone::denorm(&z, &state);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn checkpoint_round_trip_keeps_forward_bit_identical() {
    let cfg = small();
    let (store, b) = fresh(&cfg, 21);
    let dir = tempfile::tempdir().unwrap();
    b.checkpoint(&store).unwrap().save(dir.path()).unwrap();
    let mut loaded = ParamStore::<f32>::new();
    let b2 = Backbone::from_checkpoint(&mut loaded, &Checkpoint::load(dir.path()).unwrap()).unwrap();
    assert_eq!(b2.cfg, cfg);
    assert_eq!(loaded.trainable_scalar_count(), 0);
    let x = series(8, 45);
    assert!(b.forward_series(&store, &x).unwrap().bit_eq(&b2.forward_series(&loaded, &x).unwrap()));
}

#[test]
fn freezing_is_idempotent() {
    let cfg = small();
    let mut store = ParamStore::<f32>::new();
    Backbone::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
    assert_eq!(store.trainable_scalar_count(), Backbone::param_count(&cfg));
    Backbone::freeze(&mut store);
    let once: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
    Backbone::freeze(&mut store);
    let twice: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
    assert_eq!(once, twice);
    assert!(once.iter().all(|t| !t));
}

#[test]
fn layer_rejects_wrong_width() {
    let cfg = small();
    let (store, b) = fresh(&cfg, 0);
    let g = Graph::with_params(&store);
    let x = g.constant(Tensor::<f32>::zeros(vec![1, 3, cfg.d_model + 1])).unwrap();
    assert!(b.layer(&g, 0, x, None).is_err());
}

fn multi(seed: u64, channels: usize, t: usize, y: Target) -> MultiSeries {
    MultiSeries {
        sample_id: format!("s{seed}"),
        channel_names: vec![],
        x: (0..channels)
            .map(|c| series(seed * 10 + c as u64, t).iter().map(|v| v * (c + 1) as f64 + c as f64 * 3.0).collect())
            .collect(),
        y,
    }
}

fn zero_head(store: &mut ParamStore<f32>, model: &Model, bias: Option<Vec<f32>>) {
    let lin = model.head.linear();
    store.set_value(lin.weight, Tensor::zeros(vec![lin.d_in, lin.d_out])).unwrap();
    let b = bias.unwrap_or_else(|| vec![0.0; lin.d_out]);
    store.set_value(lin.bias.unwrap(), Tensor::new(vec![lin.d_out], b).unwrap()).unwrap();
}

#[test]
fn zero_forecast_head_predicts_each_channel_mean() {
    let cfg = small();
    let (mut store, b) = fresh(&cfg, 4);
    let task = TaskSpec::forecast(2, 16, 3);
    let model = Model::build(&mut store, &b, &StrategyConfig::of(StrategyKind::Linear), &task, 0).unwrap();
    zero_head(&mut store, &model, None);
    let s = multi(1, 2, 16, Target::None);
    let batch = MultiBatch::new(&[&s], &cfg).unwrap();
    let g = Graph::with_params(&store);
    let y = g.value(model.forward(&g, &batch).unwrap());
    assert_eq!(y.shape(), &[1, 2, 3]);
    for c in 0..2 {
        let mean = s.x[c].iter().sum::<f64>() / 16.0;
        for h in 0..3 {
            assert!((y.at(&[0, c, h]) as f64 - mean).abs() < 1e-5);
        }
    }
}

#[test]
fn univariate_forecast_head() {
    let cfg = small();
    let (mut store, b) = fresh(&cfg, 4);
    let model =
        Model::build(&mut store, &b, &StrategyConfig::of(StrategyKind::Linear), &TaskSpec::forecast(1, 20, 5), 0)
            .unwrap();
    let s = multi(2, 1, 20, Target::None);
    let g = Graph::with_params(&store);
    let y = model.forward(&g, &MultiBatch::new(&[&s], &cfg).unwrap()).unwrap();
    assert_eq!(g.shape(y), vec![1, 1, 5]);
}

#[test]
fn zero_classify_head_emits_its_bias() {
    let cfg = small();
    let (mut store, b) = fresh(&cfg, 4);
    let task = TaskSpec::classify(3, 25);
    let model = Model::build(&mut store, &b, &StrategyConfig::of(StrategyKind::Linear), &task, 0).unwrap();
    let bias: Vec<f32> = (0..25).map(|i| i as f32 / 10.0 - 1.0).collect();
    zero_head(&mut store, &model, Some(bias.clone()));
    let samples = [multi(3, 3, 20, Target::None), multi(4, 3, 33, Target::None)];
    let refs: Vec<&MultiSeries> = samples.iter().collect();
    let g = Graph::with_params(&store);
    let y = g.value(model.forward(&g, &MultiBatch::new(&refs, &cfg).unwrap()).unwrap());
    assert_eq!(y.shape(), &[2, 25]);
    for row in y.data().chunks(25) {
        assert_eq!(row, &bias[..]);
    }
}

#[test]
fn single_label_gives_one_logit() {
    let cfg = small();
    let (mut store, b) = fresh(&cfg, 4);
    let model =
        Model::build(&mut store, &b, &StrategyConfig::of(StrategyKind::Linear), &TaskSpec::classify(2, 1), 0).unwrap();
    let samples = [multi(5, 2, 12, Target::None), multi(6, 2, 12, Target::None)];
    let refs: Vec<&MultiSeries> = samples.iter().collect();
    let g = Graph::with_params(&store);
    let y = model.forward(&g, &MultiBatch::new(&refs, &cfg).unwrap()).unwrap();
    assert_eq!(g.shape(y), vec![2, 1]);
}
