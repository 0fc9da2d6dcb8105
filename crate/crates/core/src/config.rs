//! Run configuration: one TOML file plus `--section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{LossConfig, TrainConfig, TrainSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probability threshold for query selection and binarization.
    pub threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of clips; clip `i` uses seed `spec.seed + i`.
    pub clips: usize,
    pub spec: SyntheticSpec,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            clips: 5,
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.threshold must lie in (0, 1), got {}",
                self.eval.threshold
            )));
        }
        self.synthetic.spec.validate()
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            seed: self.seed,
            model: self.model.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    pub fn from_setup(setup: &TrainSetup) -> Self {
        RunConfig {
            seed: setup.seed,
            model: setup.model.clone(),
            loss: setup.loss.clone(),
            train: setup.train.clone(),
            ..RunConfig::default()
        }
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) with overrides applied.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let assignment = assignment.trim_start_matches("--");
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?
        .insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
