//! Run configuration stored as one flat JSON object with dotted keys
//! (`"train.seq_len": 8`). Every key can be overridden on the command line
//! with `--train.seq_len 8`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tanseg::model::{Architecture, Pooling, DEFAULT_CLAMP_EPS};
use tanseg::series::SynthConfig;
use tanseg::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Integer train:valid:test ratio.
    pub ratio: [usize; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratio: [5, 2, 3] }
    }
}

/// Architecture fields; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub filter_size: usize,
    pub n_layers: usize,
    pub pooling: Pooling,
    pub clamp_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            d_hidden: a.d_hidden,
            filter_size: a.filter_size,
            n_layers: a.n_layers,
            pooling: a.pooling,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, d_in: usize) -> Architecture {
        Architecture {
            d_in,
            d_hidden: self.d_hidden,
            filter_size: self.filter_size,
            n_layers: self.n_layers,
            pooling: self.pooling,
            clamp_eps: self.clamp_eps,
        }
    }
}

/// Training hyperparameters. The seed is the run-wide `seed` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seq_len: usize,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seq_len: t.seq_len,
            tau: t.tau,
            beta: t.beta,
            gamma: t.gamma,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub seq_len: Vec<usize>,
    pub tau: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            seq_len: vec![4, 8, 12, 16],
            tau: vec![0.3, 0.5, 0.7],
            beta: vec![0.1, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    /// Dataset root (`gen` output) or a single split directory.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint path; sidecars sit next to it.
    pub model: Option<PathBuf>,
    /// Directory written by `segment`.
    pub pred: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub grid: GridConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Defaults, then the optional file, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let defaults = flatten(&serde_json::to_value(Self::default()).expect("config serializes"));
        let mut flat = defaults.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
            if !value.is_object() {
                return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
            }
            for (key, v) in flatten(&value) {
                check_key(&defaults, &key)?;
                flat.insert(key, v);
            }
        }
        for (key, raw) in overrides {
            check_key(&defaults, key)?;
            flat.insert(key.clone(), parse_override(key, raw, &defaults[key.as_str()]));
        }
        serde_json::from_value(unflatten(flat)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_flat_json(&self) -> String {
        let flat = flatten(&serde_json::to_value(self).expect("config serializes"));
        serde_json::to_string_pretty(&Value::Object(flat)).expect("config serializes")
    }

    pub fn known_keys() -> BTreeSet<String> {
        flatten(&serde_json::to_value(Self::default()).expect("config serializes"))
            .keys()
            .cloned()
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            seq_len: t.seq_len,
            tau: t.tau,
            beta: t.beta,
            gamma: t.gamma,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: self.seed,
        }
    }

    /// Checks every section against its module's preconditions.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: tanseg::Error| CliError::Usage(e.to_string());
        self.synth.validate().map_err(usage)?;
        if self.split.ratio.iter().sum::<usize>() == 0 {
            return Err(CliError::Usage("split.ratio must have a positive entry".into()));
        }
        self.model.architecture(self.synth.d_vars).validate().map_err(usage)?;
        let base = self.train_config();
        base.validate().map_err(usage)?;
        let g = &self.grid;
        if g.seq_len.is_empty() || g.tau.is_empty() || g.beta.is_empty() {
            return Err(CliError::Usage("grid.seq_len, grid.tau and grid.beta must be non-empty".into()));
        }
        for cell in self.grid_cells() {
            cell.validate().map_err(usage)?;
        }
        Ok(())
    }

    /// The cartesian product of the grid lists, each cell a full training config.
    pub fn grid_cells(&self) -> Vec<TrainConfig> {
        let base = self.train_config();
        let mut cells = Vec::new();
        for &seq_len in &self.grid.seq_len {
            for &tau in &self.grid.tau {
                for &beta in &self.grid.beta {
                    cells.push(TrainConfig {
                        seq_len,
                        tau,
                        beta,
                        ..base.clone()
                    });
                }
            }
        }
        cells
    }
}

fn check_key(defaults: &Map<String, Value>, key: &str) -> Result<(), CliError> {
    if defaults.contains_key(key) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("unknown config key {key:?}")))
    }
}

/// Strings stay strings where the default is a string or a path; list-valued
/// keys accept `a,b,c`; everything else is read as JSON.
fn parse_override(key: &str, raw: &str, default: &Value) -> Value {
    if key.starts_with("io.") || default.is_string() {
        return Value::String(raw.to_string());
    }
    let text = if default.is_array() && !raw.trim_start().starts_with('[') {
        format!("[{raw}]")
    } else {
        raw.to_string()
    };
    serde_json::from_str(&text).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

fn unflatten(flat: Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value);
                break;
            }
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("keys nest consistently");
        }
    }
    Value::Object(root)
}
