//! Checkpoint container: magic, version, JSON manifest, then little-endian f32 arrays.
//!
//! Layout: `COLFCKPT` | u32 format version | u64 manifest length | manifest
//! bytes | concatenated array data. The manifest lists every array with its
//! shape, byte offset into the data section and length, and carries a SHA-256
//! digest of the data section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ColfError, Result};
use crate::model::{ColfModel, ModelConfig};
use crate::nn::Adam;

pub const MAGIC: &[u8; 8] = b"COLFCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Where the hypernetwork output is sliced: LFN layers in order, each weight
/// (fan_in × fan_out, row-major) followed by its bias.
pub const LFN_SLICE_ORDER: &str = "layer-major; per layer weight[in][out] then bias[out]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Free-form echo of the training configuration that produced the checkpoint.
    pub train_config: Option<serde_json::Value>,
    pub stage: usize,
    pub step: u64,
    pub adam_step: u64,
    pub lfn_slice_order: String,
    pub data_sha256: String,
    pub arrays: Vec<ArrayEntry>,
}

/// Everything a checkpoint holds, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train_config: Option<serde_json::Value>,
    pub stage: usize,
    pub step: u64,
    pub adam_step: u64,
    /// Named arrays with shapes, sorted by name.
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn capture(model: &ColfModel, adam: Option<&Adam>, stage: usize, step: u64, train_config: Option<serde_json::Value>) -> Result<Self> {
        let mut arrays = BTreeMap::new();
        for (name, var) in model.store.iter() {
            arrays.insert(
                format!("model.{name}"),
                (var.dims().to_vec(), model.store.values_f32(name)?),
            );
        }
        if let Some(adam) = adam {
            for (prefix, moments) in [("adam.m", &adam.first_moment), ("adam.v", &adam.second_moment)] {
                for (name, values) in moments {
                    let shape = model
                        .store
                        .get(name)
                        .map(|v| v.dims().to_vec())
                        .unwrap_or_else(|| vec![values.len()]);
                    arrays.insert(format!("{prefix}.{name}"), (shape, values.clone()));
                }
            }
        }
        Ok(Checkpoint {
            model: model.config.clone(),
            train_config,
            stage,
            step,
            adam_step: adam.map_or(0, |a| a.step),
            arrays,
        })
    }

    /// Copies model parameters into `model`; names and shapes must match.
    pub fn restore_model(&self, model: &ColfModel) -> Result<()> {
        for (name, var) in model.store.iter() {
            let key = format!("model.{name}");
            let (shape, values) = self
                .arrays
                .get(&key)
                .ok_or_else(|| ColfError::Integrity(format!("checkpoint lacks array '{key}'")))?;
            if shape.as_slice() != var.dims() {
                return Err(ColfError::Integrity(format!(
                    "array '{key}' has shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
            model.store.set_values(name, values)?;
        }
        Ok(())
    }

    /// Builds a fresh model from the stored configuration and parameters.
    pub fn build_model(&self, dtype: candle_core::DType) -> Result<ColfModel> {
        let model = ColfModel::new(self.model.clone(), 0, dtype)?;
        self.restore_model(&model)?;
        Ok(model)
    }

    pub fn restore_adam(&self, lr: f64) -> Adam {
        let mut adam = Adam::new(lr);
        adam.step = self.adam_step;
        for (key, (_, values)) in &self.arrays {
            if let Some(name) = key.strip_prefix("adam.m.") {
                adam.first_moment.insert(name.to_string(), values.clone());
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                adam.second_moment.insert(name.to_string(), values.clone());
            }
        }
        adam
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, (shape, values)) in &self.arrays {
            if shape.iter().product::<usize>() != values.len() {
                return Err(ColfError::Contract(format!("array '{name}' length does not match its shape")));
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset: data.len() as u64,
                len: (values.len() * 4) as u64,
            });
            for v in values {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train_config: self.train_config.clone(),
            stage: self.stage,
            step: self.step,
            adam_step: self.adam_step,
            lfn_slice_order: LFN_SLICE_ORDER.to_string(),
            data_sha256: hex(&Sha256::digest(&data)),
            arrays: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + manifest_bytes.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || ColfError::Integrity("checkpoint file is truncated".into());
        if bytes.len() < 20 {
            return Err(truncated());
        }
        if &bytes[..8] != MAGIC {
            return Err(ColfError::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ColfError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(truncated)?;
        let manifest_bytes = body.get(..mlen).ok_or_else(truncated)?;
        let manifest: CheckpointManifest = serde_json::from_slice(manifest_bytes)
            .map_err(|e| ColfError::Integrity(format!("unreadable checkpoint manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ColfError::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let data = &body[mlen..];
        let expected: u64 = manifest.arrays.iter().map(|a| a.len).sum();
        if (data.len() as u64) < expected {
            return Err(truncated());
        }
        if data.len() as u64 != expected {
            return Err(ColfError::Integrity("trailing bytes after checkpoint data".into()));
        }
        if hex(&Sha256::digest(data)) != manifest.data_sha256 {
            return Err(ColfError::Integrity("checkpoint data checksum mismatch".into()));
        }
        let mut arrays = BTreeMap::new();
        for a in &manifest.arrays {
            let n: usize = a.shape.iter().product();
            if a.len != (n * 4) as u64 {
                return Err(ColfError::Integrity(format!("array '{}' length disagrees with its shape", a.name)));
            }
            let raw = data
                .get(a.offset as usize..(a.offset + a.len) as usize)
                .ok_or_else(truncated)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.insert(a.name.clone(), (a.shape.clone(), values));
        }
        Ok(Checkpoint {
            model: manifest.model,
            train_config: manifest.train_config,
            stage: manifest.stage,
            step: manifest.step,
            adam_step: manifest.adam_step,
            arrays,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| ColfError::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| ColfError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| ColfError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ColfError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over the model parameter arrays only.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, (_, values)) in self.arrays.iter().filter(|(k, _)| k.starts_with("model.")) {
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
