//! Reversible per-series standardization.

use serde::{Deserialize, Serialize};

pub const NORM_EPS: f64 = 1e-5;

/// Statistics needed to undo [`instance_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub eps: f64,
}

impl NormState {
    /// Series whose spread is at most `eps` are only centered.
    pub fn scales(&self) -> bool {
        self.std > self.eps
    }

    pub fn normalize(&self, v: f64) -> f64 {
        if self.scales() {
            (v - self.mean) / self.std
        } else {
            v - self.mean
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        if self.scales() {
            v * self.std + self.mean
        } else {
            v + self.mean
        }
    }

    /// `(scale, shift)` with `denormalize(v) == v * scale + shift`.
    pub fn affine(&self) -> (f64, f64) {
        (if self.scales() { self.std } else { 1.0 }, self.mean)
    }
}

pub fn instance_norm(x: &[f64]) -> (Vec<f64>, NormState) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let state = NormState { mean, std: var.sqrt(), eps: NORM_EPS };
    (x.iter().map(|&v| state.normalize(v)).collect(), state)
}

pub fn denorm(y: &[f64], state: &NormState) -> Vec<f64> {
    y.iter().map(|&v| state.denormalize(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_two_three() {
        let (y, s) = instance_norm(&[1.0, 2.0, 3.0]);
        let sd = (2.0f64 / 3.0).sqrt();
        let want = [-1.0 / sd, 0.0, 1.0 / sd];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y[0] + 1.2247).abs() < 1e-4);
        assert_eq!(s.mean, 2.0);
    }

    #[test]
    fn constant_series_maps_to_zeros() {
        let (y, s) = instance_norm(&[5.0, 5.0]);
        assert_eq!(y, vec![0.0, 0.0]);
        assert!(!s.scales());
        assert_eq!(denorm(&y, &s), vec![5.0, 5.0]);
    }
}
