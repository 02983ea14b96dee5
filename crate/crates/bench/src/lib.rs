//! Fixtures shared by the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsft_core::backbone::{Backbone, BackboneConfig};
use tsft_core::data::{synth_channel_mix, ChannelMixConfig, MultiSeries};
use tsft_core::param::normal_tensor;
use tsft_core::{ParamStore, Scalar, Tensor};

pub fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape.to_vec(), 1.0)
}

/// A frozen backbone with the default architecture.
pub fn backbone() -> (ParamStore<f32>, Backbone) {
    let mut store = ParamStore::new();
    let b = Backbone::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &BackboneConfig::default()).unwrap();
    Backbone::freeze(&mut store);
    (store, b)
}

pub fn channel_mix(n: usize) -> Vec<MultiSeries> {
    synth_channel_mix(&ChannelMixConfig { n_samples: n, ..ChannelMixConfig::default() }).unwrap()
}

/// Scores with ties and roughly 30% positives.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..n).map(|_| (rng.random::<f64>() * 1000.0).round() / 1000.0).collect();
    let labels = (0..n).map(|_| rng.random_bool(0.3)).collect();
    (scores, labels)
}
