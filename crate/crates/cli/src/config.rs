//! Run configuration: line-delimited JSON files plus `--set key=value`
//! overrides. Precedence is CLI > file > defaults, and every key must name an
//! existing field.

use std::path::Path;

use anyhow::{Context, Result};
use mvlle::network::ModelConfig;
use mvlle::synthesis::{NoiseModel, DEFAULT_READ_SIGMA, DEFAULT_SHOT_GAIN};
use mvlle::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub gate_threshold: f64,
    pub shot_gain: f64,
    pub read_sigma: f64,
    /// Side length of procedurally generated scenes.
    pub procedural_side: usize,
    /// Maximum per-axis offset between procedural views.
    pub procedural_shift: usize,
    /// Procedural draws allowed per scene before giving up on the gate.
    pub max_tries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            gate_threshold: 0.2,
            shot_gain: DEFAULT_SHOT_GAIN,
            read_sigma: DEFAULT_READ_SIGMA,
            procedural_side: 64,
            procedural_shift: 3,
            max_tries: 200,
        }
    }
}

impl SynthConfig {
    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            shot_gain: self.shot_gain,
            read_sigma: self.read_sigma,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Command line that produced a snapshot; informational only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invocation: Option<Value>,
}

/// Writes `value` at `path` inside `root`, merging objects key by key.
fn apply(root: &mut Value, path: &[&str], value: Value, full: &str) -> Result<(), UsageError> {
    let unknown = || UsageError(format!("unknown config key `{full}`"));
    let (head, rest) = path.split_first().ok_or_else(unknown)?;
    let obj = root.as_object_mut().ok_or_else(unknown)?;
    // `invocation` is free-form and never validated below the top level
    if path.len() == 1 && *head == "invocation" {
        obj.insert(head.to_string(), value);
        return Ok(());
    }
    let slot = obj.get_mut(*head).ok_or_else(unknown)?;
    if !rest.is_empty() {
        return apply(slot, rest, value, full);
    }
    match (slot.is_object(), value) {
        (true, Value::Object(fields)) => {
            for (k, v) in fields {
                apply(slot, &[k.as_str()], v, &format!("{full}.{k}"))?;
            }
            Ok(())
        }
        (true, _) => Err(UsageError(format!(
            "config key `{full}` is a section, not a value"
        ))),
        (false, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn apply_object(root: &mut Value, obj: Map<String, Value>) -> Result<(), UsageError> {
    for (key, value) in obj {
        let path: Vec<&str> = key.split('.').collect();
        apply(root, &path, value, &key)?;
    }
    Ok(())
}

fn default_tree() -> Value {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("config serializes");
    tree.as_object_mut()
        .expect("config is an object")
        .insert("invocation".into(), Value::Null);
    tree
}

/// Resolves defaults, then each config file line, then `overrides`.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = default_tree();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let obj = match serde_json::from_str::<Value>(line) {
                Ok(Value::Object(o)) => o,
                _ => {
                    return Err(UsageError(format!(
                        "{}:{}: each line must be a JSON object",
                        path.display(),
                        i + 1
                    ))
                    .into())
                }
            };
            apply_object(&mut tree, obj)
                .map_err(|e| UsageError(format!("{}:{}: {}", path.display(), i + 1, e.0)))?;
        }
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override `{o}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        apply(&mut tree, &key.split('.').collect::<Vec<_>>(), value, key)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
    cfg.model
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    cfg.train
        .validate(&cfg.model)
        .map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

impl RunConfig {
    /// One JSON object per section; loadable again with `--config`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |key: &str, v: Value| {
            let mut m = Map::new();
            m.insert(key.to_string(), v);
            out.push_str(&Value::Object(m).to_string());
            out.push('\n');
        };
        if let Some(inv) = &self.invocation {
            line("invocation", inv.clone());
        }
        line(
            "model",
            serde_json::to_value(&self.model).expect("serializes"),
        );
        line(
            "train",
            serde_json::to_value(&self.train).expect("serializes"),
        );
        line(
            "synth",
            serde_json::to_value(&self.synth).expect("serializes"),
        );
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, self.to_jsonl()).with_context(|| format!("writing {}", path.display()))
    }
}
