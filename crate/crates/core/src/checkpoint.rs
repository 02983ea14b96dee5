//! Directory checkpoints: `manifest.json` listing named tensors plus free-form
//! metadata, and `weights.bin` holding their little-endian f32 values back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { tensors: Vec::new(), meta }
    }

    /// Every parameter of `store`, or only the trainable ones.
    pub fn from_store(store: &ParamStore<f32>, trainable_only: bool, meta: serde_json::Value) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, p)| !trainable_only || p.trainable)
            .map(|(_, p)| (p.name.clone(), (*p.value).clone()))
            .collect();
        Self { tensors, meta }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites the values of same-named parameters in `store`; every tensor
    /// must match an existing parameter in name and shape.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (name, t) in &self.tensors {
            let id = store.id(name)?;
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: bytes.len() as u64,
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { tensors: entries, meta: self.meta.clone() };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join(WEIGHTS), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        let bytes = fs::read(dir.join(WEIGHTS))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected = 0u64;
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            if e.byte_offset != expected {
                return Err(Error::Checkpoint(format!(
                    "`{}` starts at byte {} but the previous tensor ends at {expected}",
                    e.name, e.byte_offset
                )));
            }
            let len: usize = e.shape.iter().product();
            let start = e.byte_offset as usize;
            let end = start + 4 * len;
            let raw = bytes
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("`{}` runs past the end of {WEIGHTS}", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            expected = end as u64;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        if expected as usize != bytes.len() {
            return Err(Error::Checkpoint(format!("{WEIGHTS} has {} trailing bytes", bytes.len() - expected as usize)));
        }
        Ok(Self { tensors, meta: manifest.meta })
    }
}

/// Hex sha256 over the manifest followed by the weights.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST))?);
    h.update(fs::read(dir.join(WEIGHTS))?);
    Ok(hex(&h.finalize()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
