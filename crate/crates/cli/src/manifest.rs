use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Provenance record written into every artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Hash over the files the command read.
    pub input_hash: String,
    /// Hash over the primary artifact the command wrote.
    pub output_hash: Option<String>,
    pub tool_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

/// Git's blob id construction with SHA-256: `H("blob <len>\0" ‖ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Tree-style hash over `(name, file)` entries, independent of the order given.
pub fn tree_hash(entries: &[(String, PathBuf)]) -> Result<String, CliError> {
    let mut lines = Vec::with_capacity(entries.len());
    for (name, path) in entries {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        lines.push(format!("{} {name}\n", blob_hash(&bytes)));
    }
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn display_name(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// A manifest file plus every image and mask it references.
pub fn dataset_entries(manifest: &Path, samples: &[thforge_core::ImageSample]) -> Vec<(String, PathBuf)> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut out = vec![(display_name(manifest, base), manifest.to_path_buf())];
    for s in samples {
        out.push((display_name(&s.image_path, base), s.image_path.clone()));
        if let Some(m) = &s.mask_path {
            out.push((display_name(m, base), m.clone()));
        }
    }
    out
}

pub fn file_entry(path: &Path) -> (String, PathBuf) {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (name, path.to_path_buf())
}
