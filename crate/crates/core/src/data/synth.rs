//! Seeded synthetic corpora.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MultiSeries, Target};
use crate::error::{Error, Result};

/// Channel 0 is a unit-variance AR(1) process; channel 1 is `s·channel0 + noise`
/// with a fair random sign `s`, labeled 1 iff `s = +1`. Further channels are
/// independent AR(1) distractors. Every channel has the same marginal law in
/// both classes, so only the relation between channels carries the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelMixConfig {
    pub n_samples: usize,
    pub channels: usize,
    pub length: usize,
    pub phi: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ChannelMixConfig {
    fn default() -> Self {
        Self { n_samples: 1000, channels: 2, length: 64, phi: 0.8, noise: 0.5, seed: 0 }
    }
}

fn ar1(rng: &mut ChaCha8Rng, t: usize, phi: f64) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut x = Vec::with_capacity(t);
    let mut prev: f64 = StandardNormal.sample(rng);
    for _ in 0..t {
        x.push(prev);
        let e: f64 = StandardNormal.sample(rng);
        prev = phi * prev + innov * e;
    }
    x
}

pub fn synth_channel_mix(cfg: &ChannelMixConfig) -> Result<Vec<MultiSeries>> {
    if cfg.channels < 2 {
        return Err(Error::Config("channel-mix data needs at least 2 channels".into()));
    }
    if cfg.length == 0 || !(0.0..1.0).contains(&cfg.phi.abs()) || cfg.noise.is_nan() || cfg.noise < 0.0 {
        return Err(Error::Config("channel-mix data needs length >= 1, |phi| < 1, noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..cfg.channels).map(|c| format!("ch{c}")).collect();
    let width = cfg.n_samples.max(1).to_string().len();
    Ok((0..cfg.n_samples)
        .map(|i| {
            let positive = rng.random_bool(0.5);
            let sign = if positive { 1.0 } else { -1.0 };
            let base = ar1(&mut rng, cfg.length, cfg.phi);
            let mixed = base
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    sign * v + cfg.noise * e
                })
                .collect();
            let mut x = vec![base, mixed];
            for _ in 2..cfg.channels {
                x.push(ar1(&mut rng, cfg.length, cfg.phi));
            }
            MultiSeries {
                sample_id: format!("mix{i:0width$}"),
                channel_names: names.clone(),
                x,
                y: Target::Labels(vec![if positive { 1.0 } else { 0.0 }]),
            }
        })
        .collect())
}

/// Sums of sinusoids whose phases shift by a per-component offset from one
/// channel to the next, with per-channel gain and level, plus bounded noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSynthConfig {
    pub n_series: usize,
    pub channels: usize,
    pub length: usize,
    pub components: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ForecastSynthConfig {
    fn default() -> Self {
        Self { n_series: 8, channels: 7, length: 256, components: 3, noise: 0.1, seed: 0 }
    }
}

impl ForecastSynthConfig {
    /// No generated value exceeds this in magnitude.
    pub fn amplitude_bound(&self) -> f64 {
        1.0 + 1.5 * self.components as f64 + self.noise
    }
}

pub fn synth_forecast(cfg: &ForecastSynthConfig) -> Result<Vec<MultiSeries>> {
    if cfg.channels == 0 || cfg.length == 0 || cfg.components == 0 || cfg.noise.is_nan() || cfg.noise < 0.0 {
        return Err(Error::Config("forecast data needs channels, length, components >= 1 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..cfg.channels).map(|c| format!("ch{c}")).collect();
    Ok((0..cfg.n_series)
        .map(|i| {
            let comps: Vec<(f64, f64, f64, f64)> = (0..cfg.components)
                .map(|_| {
                    (
                        rng.random_range(0.2..=1.0),
                        rng.random_range(6.0..=52.0),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.0..=PI / 2.0),
                    )
                })
                .collect();
            let x = (0..cfg.channels)
                .map(|c| {
                    let gain: f64 = rng.random_range(0.5..=1.5);
                    let level: f64 = rng.random_range(-1.0..=1.0);
                    (0..cfg.length)
                        .map(|t| {
                            let wave: f64 = comps
                                .iter()
                                .map(|&(a, period, phase, shift)| {
                                    a * (2.0 * PI * t as f64 / period + phase + c as f64 * shift).sin()
                                })
                                .sum();
                            let e = if cfg.noise > 0.0 { rng.random_range(-cfg.noise..=cfg.noise) } else { 0.0 };
                            level + gain * wave + e
                        })
                        .collect()
                })
                .collect();
            MultiSeries { sample_id: format!("fc{i}"), channel_names: names.clone(), x, y: Target::None }
        })
        .collect())
}
