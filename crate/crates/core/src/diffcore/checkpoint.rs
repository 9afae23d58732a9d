//! JSON checkpoints: parameter name → {shape, base64 little-endian f64 values}.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: String,
}

impl StoredTensor {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        StoredTensor {
            shape: t.shape().to_vec(),
            values: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor> {
        let bytes = B64
            .decode(&self.values)
            .map_err(|e| Error::Parse(format!("bad base64 tensor payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Parse("tensor payload is not a multiple of 8 bytes".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// The model configuration the parameters were built for.
    pub model_config: serde_json::Value,
    pub params: BTreeMap<String, StoredTensor>,
}

/// Hex SHA-256 of the canonical JSON encoding of a config.
pub fn config_hash(config: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(config).expect("json value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl Checkpoint {
    pub fn from_params(model_config: serde_json::Value, params: &ParamSet) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model_config_hash: config_hash(&model_config),
            },
            model_config,
            params: params
                .iter()
                .map(|(name, t)| (name.to_string(), StoredTensor::encode(t)))
                .collect(),
        }
    }

    /// Copies stored tensors into `params`; every parameter must be present.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        if self.header.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format_version {}",
                self.header.format_version
            )));
        }
        if config_hash(&self.model_config) != self.header.model_config_hash {
            return Err(Error::Parse("model_config_hash does not match model_config".into()));
        }
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {name}")))?;
            params.assign(name, stored.decode()?)?;
        }
        if self.params.len() != names.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                names.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}
