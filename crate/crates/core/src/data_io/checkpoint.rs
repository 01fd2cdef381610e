//! Binary checkpoint format.
//!
//! ```text
//! "KWST" | u32 LE version | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header lists the generation, architecture, training config hash, the
//! per-layer tensor shapes in payload order and the SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KwsError, Result};
use crate::model::{ArchConfig, KwsModel, LayerShape, ModelParams};

pub const MAGIC: &[u8; 4] = b"KWST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub generation: u32,
    pub arch_config: ArchConfig,
    pub parameters: ModelParams,
    pub training_config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    generation: u32,
    arch_config: ArchConfig,
    training_config_hash: String,
    layers: Vec<LayerShape>,
    payload_sha256: String,
}

impl ModelCheckpoint {
    pub fn new(model: &KwsModel, generation: u32, training_config_hash: impl Into<String>) -> Self {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            generation,
            arch_config: model.arch.clone(),
            parameters: model.params.clone(),
            training_config_hash: training_config_hash.into(),
        }
    }

    pub fn model(&self) -> Result<KwsModel> {
        KwsModel::new(self.arch_config.clone(), self.parameters.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.arch_config.validate()?;
        if self.parameters.param_count() != self.arch_config.param_count() {
            return Err(KwsError::Shape(
                "checkpoint parameters do not match arch_config".into(),
            ));
        }
        let payload: Vec<u8> = self
            .parameters
            .to_flat()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let header = serde_json::to_vec(&Header {
            generation: self.generation,
            arch_config: self.arch_config.clone(),
            training_config_hash: self.training_config_hash.clone(),
            layers: self.arch_config.layer_shapes(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(KwsError::Format(
                "file shorter than the fixed preamble".into(),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(KwsError::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(KwsError::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| KwsError::Corruption("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| KwsError::Format(format!("header: {e}")))?;

        let payload = &bytes[header_end..];
        if !payload.len().is_multiple_of(8) {
            return Err(KwsError::Corruption(format!(
                "payload of {} bytes is not a whole number of f64 values",
                payload.len()
            )));
        }
        let declared: usize = header
            .layers
            .iter()
            .flat_map(|l| &l.tensors)
            .map(|t| t.iter().product::<usize>())
            .sum();
        if declared != payload.len() / 8 {
            return Err(KwsError::Corruption(format!(
                "header declares {declared} parameters, payload holds {}",
                payload.len() / 8
            )));
        }
        header
            .arch_config
            .validate()
            .map_err(|e| KwsError::Format(e.to_string()))?;
        if header.layers != header.arch_config.layer_shapes() {
            return Err(KwsError::Corruption(
                "layer shapes disagree with arch_config".into(),
            ));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(KwsError::Corruption("payload checksum mismatch".into()));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let parameters = ModelParams::from_flat(&header.arch_config, &flat)?;
        Ok(ModelCheckpoint {
            format_version: version,
            generation: header.generation,
            arch_config: header.arch_config,
            parameters,
            training_config_hash: header.training_config_hash,
        })
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| KwsError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| KwsError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
