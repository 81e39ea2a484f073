//! Experiment configuration: one TOML file with `data`, `model`, `train` and
//! `eval` sections plus a master seed, patched by dot-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// File name of the resolved-config snapshot in every run directory.
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives data generation and model initialization. Batch order and
    /// consensus subsets use `train.seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Parses an override value as a TOML literal, falling back to a bare string
/// so `--data.mode PV` works without quotes.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot-separated) in `root`, creating intermediate tables.
pub fn set_path(root: &mut Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override path `{path}`")));
    }
    let (leaf, parents) = keys.split_last().expect("nonempty");
    let mut table = root;
    for k in parents {
        let slot = table.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match slot {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{path}`: `{k}` is not a section"))),
        };
    }
    table.insert(leaf.to_string(), parse_value(raw));
    Ok(())
}

impl ExperimentConfig {
    /// Builds a config from optional TOML text and `(path, value)` overrides
    /// applied in order.
    pub fn from_toml_with(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root: Table = match text {
            Some(t) => t.parse().map_err(|e| Error::Config(format!("config: {e}")))?,
            None => Table::new(),
        };
        for (path, raw) in overrides {
            set_path(&mut root, path, raw)?;
        }
        let cfg: ExperimentConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_toml_with(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}
