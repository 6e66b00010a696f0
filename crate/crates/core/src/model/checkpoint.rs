//! Single-file checkpoints: a safetensors archive whose metadata carries a
//! JSON header (format version, model config, counters, seed and any trainer
//! extras). Tensors are stored with their native dtype, so save → load → save
//! is bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "introvac.header";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub epoch: u64,
    pub global_step: u64,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Writes to a temporary sibling and renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metadata = HashMap::new();
        metadata.insert(HEADER_KEY.to_string(), serde_json::to_string(&self.header)?);
        let tmp = path.with_extension("tmp");
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        safetensors::serialize_to_file(self.tensors.iter(), Some(metadata), &tmp)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (_, meta) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{} has no header", path.display())))?;
        let header: CheckpointHeader = serde_json::from_str(raw)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { header, tensors })
    }
}
