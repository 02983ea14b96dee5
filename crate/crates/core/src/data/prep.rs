use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::csv_io::RawSample;
use super::{MultiSeries, Target};
use crate::error::{Error, Result};

/// Forward fill per channel; leading gaps take the channel's default.
pub fn impute(raw: RawSample, defaults: &BTreeMap<String, f64>) -> Result<MultiSeries> {
    let mut x = Vec::with_capacity(raw.values.len());
    for (c, col) in raw.values.iter().enumerate() {
        let name = raw.channel_names.get(c).cloned().unwrap_or_else(|| format!("channel{c}"));
        let mut last: Option<f64> = None;
        let mut row = Vec::with_capacity(col.len());
        for v in col {
            let filled = match (v, last) {
                (Some(v), _) => *v,
                (None, Some(prev)) => prev,
                (None, None) => *defaults.get(&name).ok_or_else(|| Error::MissingDefault(name.clone()))?,
            };
            last = Some(filled);
            row.push(filled);
        }
        x.push(row);
    }
    let s = raw.into_series(x);
    s.validate()?;
    Ok(s)
}

/// Maps each category to its index in `order`; missing cells stay missing.
pub fn encode_ordinal(values: &[Option<&str>], order: &[String], column: &str) -> Result<Vec<Option<f64>>> {
    values
        .iter()
        .map(|v| {
            v.map(|s| {
                order
                    .iter()
                    .position(|o| o == s)
                    .map(|i| i as f64)
                    .ok_or_else(|| Error::UnseenCategory { column: column.to_string(), value: s.to_string() })
            })
            .transpose()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

/// Seeded shuffle, then `floor(r_train·N)` train and `floor(r_val·N)` validation
/// items; the rest are test items.
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit<T>> {
    let n = items.len();
    if n < 3 {
        return Err(Error::Data(format!("cannot split {n} samples three ways")));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    // The small offset keeps products such as 0.6·100 from rounding down.
    let n_train = (a * n as f64 + 1e-9).floor() as usize;
    let n_val = ((b * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&idx[..n_train]),
        val: pick(&idx[n_train..n_train + n_val]),
        test: pick(&idx[n_train + n_val..]),
        seed,
    })
}

/// Sliding windows of `lookback` inputs followed by `horizon` targets on every channel.
pub fn make_windows(series: &MultiSeries, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<MultiSeries>> {
    series.validate()?;
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::invalid("lookback, horizon, and stride must be at least 1"));
    }
    let total = series.len();
    if total < lookback + horizon {
        return Err(Error::SeriesTooShort { need: lookback + horizon, got: total });
    }
    let count = (total - lookback - horizon) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let s = w * stride;
            MultiSeries {
                sample_id: format!("{}#w{w}", series.sample_id),
                channel_names: series.channel_names.clone(),
                x: series.x.iter().map(|r| r[s..s + lookback].to_vec()).collect(),
                y: Target::Future(series.x.iter().map(|r| r[s + lookback..s + lookback + horizon].to_vec()).collect()),
            }
        })
        .collect())
}
