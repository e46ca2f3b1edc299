//! Experiment configuration: TOML files with dotted-key overrides.
//!
//! ```toml
//! name = "er-dualhsic"
//! seeds = [0, 1, 2]
//!
//! [data]
//! source = "blobs"
//! num_tasks = 5
//!
//! [model]
//! hidden_dims = [64, 64]
//!
//! [train]
//! base = "er"
//! buffer_capacity = 50
//!
//! [dualhsic]
//! lambda_ha = -0.75
//! hbr_layers = "all"
//! ```
//!
//! Every field can be set from the command line as `section.field=value`,
//! where `value` is read as a TOML literal and falls back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BaseLoss, DualHsicConfig};
use crate::network::{Activation, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Blob samples per class before the 80/20 split.
    pub samples_per_class: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    /// Fixed data seed; when absent each run seed also seeds the data.
    pub seed: Option<u64>,
    pub normalize: bool,
    /// CSV file, for `source = "csv"`.
    pub path: Option<PathBuf>,
    /// IDX image and label files, for `source = "idx"`.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            num_tasks: 5,
            classes_per_task: 2,
            samples_per_class: 250,
            dim: 20,
            cluster_spread: 1.0,
            seed: None,
            normalize: true,
            path: None,
            images: None,
            labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMethod {
    Er,
    Derpp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Tasks arrive one after another; only the buffer remembers the past.
    Continual,
    /// Task `t` trains on the union of tasks `1..=t`: the upper-bound baseline.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub base: BaseMethod,
    pub derpp_alpha: f64,
    pub derpp_beta: f64,
    pub buffer_capacity: usize,
    /// Epochs per task.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Reservoir insertion on every epoch instead of only the first.
    pub insert_every_epoch: bool,
    pub reset_head_per_task: bool,
    /// Also record seen-task accuracy after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Continual,
            base: BaseMethod::Er,
            derpp_alpha: 0.1,
            derpp_beta: 0.5,
            buffer_capacity: 50,
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.0,
            insert_every_epoch: false,
            reset_head_per_task: false,
            eval_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn base_loss(&self) -> BaseLoss {
        match self.base {
            BaseMethod::Er => BaseLoss::Er,
            BaseMethod::Derpp => BaseLoss::Derpp {
                alpha: self.derpp_alpha,
                beta: self.derpp_beta,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dualhsic: DualHsicConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dualhsic: DualHsicConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table = s
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Returns a copy with `key=value` applied.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut t = self.to_table();
        apply_override(&mut t, canonical_key(key), value)?;
        Self::from_table(t)
    }

    /// Checks everything that does not need the dataset loaded.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.data.num_tasks == 0 {
            return Err(Error::Config("data.num_tasks must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be positive, got {}",
                self.train.lr
            )));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if self.model.hidden_dims.is_empty() || self.model.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "model.hidden_dims needs at least one nonzero width".into(),
            ));
        }
        match self.data.source {
            DataSource::Csv if self.data.path.is_none() => {
                return Err(Error::Config("data.path is required for csv data".into()))
            }
            DataSource::Idx if self.data.images.is_none() || self.data.labels.is_none() => {
                return Err(Error::Config(
                    "data.images and data.labels are required for idx data".into(),
                ))
            }
            _ => {}
        }
        self.dualhsic.validate(self.model.hidden_dims.len())
    }

    pub fn mlp_spec(&self, input_dim: usize, num_classes: usize) -> Result<MlpSpec> {
        MlpSpec::new(
            input_dim,
            self.model.hidden_dims.clone(),
            num_classes,
            self.model.activation,
        )
    }
}

/// Alternative spellings accepted in files, mapped to the field they set.
const KEY_ALIASES: &[(&str, &str)] = &[("dualhsic.ha_target", "dualhsic.hbr_target")];

fn canonical_key(key: &str) -> &str {
    KEY_ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map_or(key, |(_, canonical)| canonical)
}

/// Sets `dotted.key` in `table` to `raw`, parsed as a TOML literal when
/// possible and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let value = parse_literal(raw);
    let (last, parents) = parts.split_last().expect("nonempty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`.
pub fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
