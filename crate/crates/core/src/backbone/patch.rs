//! Splitting normalized series into fixed-length patches and padding batches.

use std::sync::Arc;

use super::config::BackboneConfig;
use super::norm::{instance_norm, NormState};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `ceil(t / stride)`.
pub fn patch_count(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Patch `i` covers `x[i*stride .. i*stride + patch_len]`, zero-filled past the end.
/// Returns the flattened patches and their count.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<(Vec<f64>, usize)> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::invalid("patch_len and stride must be at least 1"));
    }
    if x.is_empty() {
        return Err(Error::invalid("cannot patchify an empty series"));
    }
    let p = patch_count(x.len(), stride);
    let mut out = vec![0.0; p * patch_len];
    for i in 0..p {
        let start = i * stride;
        let end = (start + patch_len).min(x.len());
        out[i * patch_len..i * patch_len + (end - start)].copy_from_slice(&x[start..end]);
    }
    Ok((out, p))
}

/// A batch of normalized, patchified univariate series padded to a common patch count.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub n: usize,
    pub patches: usize,
    pub patch_len: usize,
    /// `n * patches * patch_len`, zero in padded patches.
    pub values: Vec<f64>,
    /// `n * patches`; `false` marks padding.
    pub mask: Arc<[bool]>,
    pub norms: Vec<NormState>,
}

impl PatchBatch {
    pub fn from_series(series: &[&[f64]], cfg: &BackboneConfig) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut per = Vec::with_capacity(series.len());
        let mut norms = Vec::with_capacity(series.len());
        for s in series {
            if s.len() > cfg.max_t {
                return Err(Error::invalid(format!("series of length {} exceeds max_t {}", s.len(), cfg.max_t)));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("series contains a non-finite value"));
            }
            let (z, state) = instance_norm(s);
            per.push(patchify(&z, cfg.patch_len, cfg.stride)?);
            norms.push(state);
        }
        let patches = per.iter().map(|(_, p)| *p).max().unwrap_or(0);
        let mut values = vec![0.0; series.len() * patches * cfg.patch_len];
        let mut mask = vec![false; series.len() * patches];
        for (i, (v, p)) in per.iter().enumerate() {
            let base = i * patches * cfg.patch_len;
            values[base..base + v.len()].copy_from_slice(v);
            mask[i * patches..i * patches + p].fill(true);
        }
        Ok(Self { n: series.len(), patches, patch_len: cfg.patch_len, values, mask: mask.into(), norms })
    }

    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.n, self.patches, self.patch_len], self.values.iter().map(|&v| T::from_f64(v)).collect())
            .expect("length matches shape")
    }

    pub fn real_patches(&self, i: usize) -> usize {
        self.mask[i * self.patches..(i + 1) * self.patches].iter().filter(|&&m| m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_arithmetic() {
        let x: Vec<f64> = (1..=16).map(f64::from).collect();
        assert_eq!(patchify(&x, 4, 4).unwrap().1, 4);
        let (v, p) = patchify(&x[..10], 4, 4).unwrap();
        assert_eq!(p, 3);
        assert_eq!(&v[8..], &[9.0, 10.0, 0.0, 0.0]);
        assert_eq!(patchify(&[1.0], 4, 4).unwrap().1, 1);
        assert!(patchify(&x, 0, 4).is_err());
    }

    #[test]
    fn batch_padding_marks_mask() {
        let cfg = BackboneConfig { patch_len: 4, stride: 4, ..BackboneConfig::default() };
        let a: Vec<f64> = (0..16).map(f64::from).collect();
        let b: Vec<f64> = (0..6).map(f64::from).collect();
        let batch = PatchBatch::from_series(&[&a, &b], &cfg).unwrap();
        assert_eq!(batch.patches, 4);
        assert_eq!(&batch.mask[..], &[true, true, true, true, true, true, false, false]);
        assert_eq!(batch.real_patches(1), 2);
    }
}
