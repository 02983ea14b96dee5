use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the univariate backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub max_t: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, patch_len: 8, stride: 8, max_t: 512 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("backbone: {m}")));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.patch_len == 0 || self.stride == 0 {
            return bad("patch_len and stride must be at least 1");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.d_ff == 0 || self.max_t == 0 {
            return bad("d_ff and max_t must be positive");
        }
        Ok(())
    }

    /// Patches of the longest supported series.
    pub fn max_patches(&self) -> usize {
        self.max_t.div_ceil(self.stride)
    }

    pub fn patches_for(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }
}
