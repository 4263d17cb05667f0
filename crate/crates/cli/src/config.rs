//! Layered run configuration: profile defaults, then an optional JSON file, then `THFORGE_*`
//! environment variables, then `--set` overrides, then dedicated flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thforge_core::evaluation::EvalConfig;
use thforge_core::{LossConfig, ModelConfig, Profile, TrainConfig};
use thforge_server::ServiceConfig;

use crate::CliError;

pub const ENV_PREFIX: &str = "THFORGE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            model: ModelConfig::for_profile(profile),
            loss: LossConfig::default(),
            train: match profile {
                Profile::Desk => TrainConfig::desk(),
                Profile::Full => TrainConfig::default(),
            },
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override: JSON when it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) in `root`. Every segment must already exist, so typos fail
/// instead of being silently ignored.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Input(format!("{path}: {} is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Input(format!("unknown config key {path:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(CliError::Input("empty config key".into()))
}

pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `THFORGE_TRAIN__EPOCHS=3` becomes `train.epochs = 3`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let key = k.strip_prefix(ENV_PREFIX)?;
            (!key.is_empty()).then(|| (key.to_lowercase().replace("__", "."), parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub struct Layers<'a> {
    pub profile: Profile,
    pub file: Option<&'a Path>,
    pub env: Vec<(String, Value)>,
    pub sets: &'a [String],
}

pub fn resolve(layers: Layers<'_>) -> Result<RunConfig, CliError> {
    let mut v = serde_json::to_value(RunConfig::for_profile(layers.profile)).expect("config serializes");
    if let Some(path) = layers.file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        merge(&mut v, patch);
    }
    for (k, val) in layers.env {
        set_path(&mut v, &k, val).map_err(|e| CliError::Input(format!("{ENV_PREFIX}*: {e}")))?;
    }
    for s in layers.sets {
        let (k, val) = parse_assignment(s)?;
        set_path(&mut v, &k, val)?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| CliError::Input(format!("invalid configuration: {e}")))?;
    cfg.model.validate()?;
    cfg.loss.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}
