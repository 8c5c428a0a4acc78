//! Hierarchical JSON configuration with dotted-path overrides.
//!
//! A config file is deep-merged over the defaults, then each
//! `dotted.path=value` override is applied, then the result is decoded
//! with unknown keys rejected. Override values are parsed as JSON and fall
//! back to a plain string.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{Protocol, DEFAULT_CMC_RANKS};
use crate::trainer::TrainConfig;

/// Environment variable that replaces `train.seed`.
pub const SEED_ENV: &str = "SSBVER_SEED";

pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub cmc_ranks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::default(),
            cmc_ranks: DEFAULT_CMC_RANKS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Recursively merges `overlay` into `base`; non-object values replace.
pub fn merge_json(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.path=value` override.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {} is not an object", segments[..i].join("."))))?;
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*seg)
            .ok_or_else(|| Error::Config(format!("override {path}: unknown key {}", segments[..=i].join("."))))?;
    }
    unreachable!("non-empty path")
}

/// Builds a config from defaults, an optional file, overrides and the seed
/// environment variable.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    resolve_config_with_seed(file, overrides, env_seed.as_deref())
}

pub fn resolve_config_with_seed(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<CliConfig> {
    let mut value = serde_json::to_value(CliConfig::default())?;
    if let Some(path) = file {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path)?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        if !overlay.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        merge_json(&mut value, overlay);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: CliConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(seed) = env_seed {
        cfg.train.seed = seed
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

/// Writes the effective configuration as pretty JSON.
pub fn write_effective_config(dir: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(EFFECTIVE_CONFIG_FILE), serde_json::to_string_pretty(value)?)?;
    Ok(())
}
