//! Single-file checkpoints: a safetensors archive whose header metadata carries the model
//! configuration as JSON under the `thforge` key.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};

const META_KEY: &str = "thforge";
pub const FORMAT_VERSION: u32 = 1;

/// Everything in a checkpoint besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Epoch the weights were taken from, if produced by training.
    #[serde(default)]
    pub epoch: Option<usize>,
    /// Classification threshold selected on validation data.
    #[serde(default)]
    pub det_threshold: Option<f64>,
    #[serde(default)]
    pub seg_threshold: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            epoch: None,
            det_threshold: None,
            seg_threshold: None,
        }
    }
}

/// Writes `tensors` plus a JSON metadata string, atomically (temp file in the same directory,
/// then rename).
pub fn write_archive(path: &Path, tensors: &BTreeMap<String, Tensor>, meta_json: &str) -> Result<()> {
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), meta_json.to_string());
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(info))?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads every tensor and the metadata string of an archive.
pub fn read_archive(path: &Path) -> Result<(BTreeMap<String, Tensor>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .cloned()
        .ok_or_else(|| Error::Input(format!("{}: not a thforge checkpoint (no metadata)", path.display())))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((tensors.into_iter().collect(), meta))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let (_, meta) = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Input(format!(
            "{}: unsupported checkpoint format version {}",
            path.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

impl ModelState {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if meta.config != self.config {
            return Err(Error::Config("checkpoint metadata config differs from model config".into()));
        }
        write_archive(path, &self.store.tensors(), &serde_json::to_string(meta)?)
    }

    /// Rebuilds a model from a checkpoint, using the configuration stored in it.
    pub fn load(path: &Path, dtype: DType) -> Result<(Self, CheckpointMeta)> {
        let meta = read_meta(path)?;
        let state = Self::new(&meta.config, 0, dtype, (0.0, 0.0))?;
        let (tensors, _) = read_archive(path)?;
        state.store.load(&tensors)?;
        Ok((state, meta))
    }

    /// Loads weights into an existing model; every name and shape must match.
    pub fn load_weights(&self, path: &Path) -> Result<CheckpointMeta> {
        let meta = read_meta(path)?;
        let (tensors, _) = read_archive(path)?;
        self.store.load(&tensors)?;
        Ok(meta)
    }
}
