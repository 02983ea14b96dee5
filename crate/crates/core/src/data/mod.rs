//! Multivariate samples, ingestion, preprocessing, and synthetic corpora.

mod csv_io;
mod prep;
mod synth;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, write_csv, RawSample, Schema};
pub use prep::{encode_ordinal, impute, make_windows, split, DatasetSplit};
pub use synth::{synth_channel_mix, synth_forecast, ChannelMixConfig, ForecastSynthConfig};

use crate::error::{Error, Result};

/// What a sample should predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    None,
    /// One probability per label.
    Labels(Vec<f64>),
    /// `C × H` future values.
    Future(Vec<Vec<f64>>),
}

/// One multivariate sample `x ∈ R^{C×T}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeries {
    pub sample_id: String,
    pub channel_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Target,
}

impl MultiSeries {
    pub fn channels(&self) -> usize {
        self.x.len()
    }

    pub fn len(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks `C ≥ 1`, `T ≥ 1`, equal channel lengths, and finite values.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.x.is_empty() || t == 0 {
            return Err(Error::Data(format!("sample `{}` is empty", self.sample_id)));
        }
        for (c, row) in self.x.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Data(format!(
                    "sample `{}`: channel {c} has {} steps, expected {t}",
                    self.sample_id,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::MissingValue { sample: self.sample_id.clone(), channel: c });
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Option<&[f64]> {
        match &self.y {
            Target::Labels(l) => Some(l),
            _ => None,
        }
    }
}

/// Rows of `x` as univariate series, in channel order.
pub fn channel_split(x: &MultiSeries) -> Result<Vec<&[f64]>> {
    x.validate()?;
    Ok(x.x.iter().map(Vec::as_slice).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: Vec<Vec<f64>>) -> MultiSeries {
        MultiSeries { sample_id: "s".into(), channel_names: vec![], x, y: Target::None }
    }

    #[test]
    fn split_preserves_rows() {
        let s = sample(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![0.0; 5], vec![-1.0; 5]]);
        let parts = channel_split(&s).unwrap();
        assert_eq!(parts.len(), 3);
        let back: Vec<Vec<f64>> = parts.iter().map(|p| p.to_vec()).collect();
        assert_eq!(back, s.x);
        assert_eq!(channel_split(&sample(vec![vec![7.0]])).unwrap(), vec![&[7.0][..]]);
    }

    #[test]
    fn nan_rejected() {
        assert!(channel_split(&sample(vec![vec![1.0, f64::NAN]])).is_err());
        assert!(channel_split(&sample(vec![vec![]])).is_err());
    }
}
