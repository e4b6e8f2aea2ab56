//! Run configuration: TOML with `[model]`, `[optim]`, `[subspace]`,
//! `[eval]` and `[data]` tables plus a top-level `seed`, and `key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::data::{self, CsvSchema, DataError, Task, TrainTest};
use crate::trainer::{
    EvalConfig, InvalidField, ModelConfig, OptimConfig, SubspaceConfig, TrainConfig,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("malformed override {0:?}, expected key=value")]
    Override(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` is ambiguous: {candidates:?}")]
    Ambiguous {
        key: String,
        candidates: Vec<String>,
    },
    #[error(transparent)]
    Invalid(#[from] InvalidField),
}

impl ConfigError {
    /// Dotted name of the offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid(f) => Some(&f.field),
            ConfigError::UnknownKey(k) | ConfigError::Ambiguous { key: k, .. } => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    TwoMoons,
    Sine,
    Csv,
    Mnist,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Example count of synthetic tasks.
    pub n: usize,
    /// Noise of synthetic tasks.
    pub noise: f64,
    /// CSV file or MNIST directory, relative to the config file.
    pub path: String,
    pub label_column: String,
    pub task: Task,
    /// Held-out share for tasks without a fixed test set.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::TwoMoons,
            n: 2000,
            noise: 0.1,
            path: String::new(),
            label_column: "label".into(),
            task: Task::Classification,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub subspace: SubspaceConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            model: t.model,
            optim: t.optim,
            subspace: t.subspace,
            eval: t.eval,
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            model: self.model.clone(),
            optim: self.optim.clone(),
            subspace: self.subspace.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), InvalidField> {
        self.train_config().validate()?;
        let bad = |field: &str, reason: &str| InvalidField {
            field: field.into(),
            reason: reason.into(),
        };
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(bad("data.test_fraction", "must lie in (0, 1)"));
        }
        match self.data.kind {
            DataKind::TwoMoons | DataKind::Sine => {
                if self.data.n < 2 {
                    return Err(bad("data.n", "must be at least 2"));
                }
                if self.data.noise.is_nan() || self.data.noise < 0.0 {
                    return Err(bad("data.noise", "must be nonnegative"));
                }
            }
            DataKind::Csv | DataKind::Mnist => {
                if self.data.path.is_empty() {
                    return Err(bad("data.path", "required for file-backed data"));
                }
            }
        }
        Ok(())
    }

    /// Parse TOML text, apply `key=value` overrides, then validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Materialize the dataset; relative paths resolve against `base`.
    pub fn load_data(&self, base: &Path) -> Result<TrainTest, DataError> {
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let d = &self.data;
        match d.kind {
            DataKind::TwoMoons => {
                data::gen_two_moons(d.n, d.noise, self.seed)?.split(d.test_fraction, self.seed)
            }
            DataKind::Sine => {
                data::gen_sine(d.n, d.noise, self.seed)?.split(d.test_fraction, self.seed)
            }
            DataKind::Csv => data::load_csv(
                &resolve(&d.path),
                &CsvSchema {
                    label_column: d.label_column.clone(),
                    task: d.task,
                },
            )?
            .split(d.test_fraction, self.seed),
            DataKind::Mnist => data::load_mnist_subset(&resolve(&d.path)),
        }
    }
}

/// Dotted paths of every leaf in the default configuration.
fn leaf_paths() -> Vec<String> {
    fn walk(prefix: &str, t: &Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Table(sub) => walk(&path, sub, out),
                _ => out.push(path),
            }
        }
    }
    let Value::Table(t) = Value::try_from(RunConfig::default()).expect("config serializes") else {
        unreachable!("config is a table")
    };
    let mut out = Vec::new();
    walk("", &t, &mut out);
    out
}

/// Resolve `key` to a dotted path: dotted keys are taken as written, bare
/// keys must name exactly one leaf.
pub fn resolve_key(key: &str) -> Result<String, ConfigError> {
    let leaves = leaf_paths();
    if leaves.iter().any(|l| l == key) {
        return Ok(key.to_string());
    }
    if key.contains('.') {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    let hits: Vec<String> = leaves
        .into_iter()
        .filter(|l| l.rsplit('.').next() == Some(key))
        .collect();
    match hits.len() {
        0 => Err(ConfigError::UnknownKey(key.to_string())),
        1 => Ok(hits.into_iter().next().expect("one hit")),
        _ => Err(ConfigError::Ambiguous {
            key: key.to_string(),
            candidates: hits,
        }),
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path = resolve_key(key.trim())?;
    let mut value = parse_value(raw.trim());
    // integers written where a real is expected stay reals
    if let (Value::Integer(i), Some(Value::Float(_))) = (&value, default_leaf(&path)) {
        value = Value::Float(*i as f64);
    }
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn default_leaf(path: &str) -> Option<Value> {
    let mut v = Value::try_from(RunConfig::default()).ok()?;
    for p in path.split('.') {
        v = v.as_table()?.get(p)?.clone();
    }
    Some(v)
}
