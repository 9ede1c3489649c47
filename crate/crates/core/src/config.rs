//! Experiment configuration: a sectioned TOML file plus dotted overrides.
//!
//! Every section rejects unknown keys. The effective configuration is
//! echoed verbatim into each run's output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptor::AdaptorConfig;
use crate::bench::{ArchSpec, Corruption, CorruptionKind, TrainConfig};
use crate::engine::{GradErrorSpec, OnlineConfig, OptimConfig, PgdConfig, RunConfig};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;
use crate::select::SelectionConfig;
use crate::zoo::ZooConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Corruption kinds evaluated, in order.
    pub corruptions: Vec<CorruptionKind>,
    pub severity: u8,
    /// Use this `BBTD` file as the (already shifted) test set instead of
    /// generating and corrupting one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_size: 2000,
            test_size: 1000,
            corruptions: vec![CorruptionKind::GaussianNoise],
            severity: 5,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    /// Load a `BBTN` network instead of training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Spawn this command and query it over stdio instead.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        let r = RunConfig::default();
        Self {
            epochs: r.epochs,
            batch_size: r.batch_size,
            shuffle: r.shuffle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    #[default]
    DaPl,
    DaDirect,
    DaPgd,
    DaZooInput,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::DaPl => "da-pl",
            BaselineMethod::DaDirect => "da-direct",
            BaselineMethod::DaPgd => "da-pgd",
            BaselineMethod::DaZooInput => "da-zoo-input",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub method: BaselineMethod,
}

/// The small model and adaptor used for gradient-error measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradErrorSection {
    /// Average-pooling factor applied to the images.
    pub downsample: usize,
    pub samples: usize,
    pub arch: ArchSpec,
    pub adaptor_hidden: usize,
    pub flip_rate: f64,
    pub trials: usize,
    pub tau: f64,
    pub rho: f64,
    pub alpha: f64,
    pub fd_step: f64,
}

impl Default for GradErrorSection {
    fn default() -> Self {
        let spec = GradErrorSpec::default();
        Self {
            downsample: 2,
            samples: 64,
            arch: ArchSpec {
                conv1_channels: 4,
                conv2_channels: 8,
            },
            adaptor_hidden: 1,
            flip_rate: spec.flip_rate,
            trials: spec.trials,
            tau: spec.selection.tau,
            rho: spec.selection.rho,
            alpha: spec.alpha,
            fd_step: spec.fd_step,
        }
    }
}

impl GradErrorSection {
    pub fn spec(&self) -> GradErrorSpec {
        GradErrorSpec {
            flip_rate: self.flip_rate,
            trials: self.trials,
            selection: SelectionConfig {
                tau: self.tau,
                rho: self.rho,
            },
            alpha: self.alpha,
            fd_step: self.fd_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Adaptor weights to apply before the model; the raw model otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptor_path: Option<PathBuf>,
    /// Also report clean accuracy.
    pub clean: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            adaptor_path: None,
            clean: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    /// Fill the `seconds` column of metrics files. Off by default so that
    /// repeated runs produce identical bytes.
    pub timing: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub adaptor: AdaptorConfig,
    pub run: RunSection,
    pub zoo: ZooConfig,
    pub optim: OptimConfig,
    pub objective: ObjectiveConfig,
    pub selection: SelectionConfig,
    pub online: OnlineConfig,
    pub pgd: PgdConfig,
    pub baseline: BaselineSection,
    pub grad_error: GradErrorSection,
    pub eval: EvalSection,
}


fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a parsed table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses `text` and applies `overrides` in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        self.adaptor.validate()?;
        self.grad_error.spec().validate()?;
        if self.data.classes < 2 || self.data.classes > crate::bench::MAX_CLASSES {
            return Err(Error::Config(format!(
                "data.classes must lie in 2..=6, got {}",
                self.data.classes
            )));
        }
        if self.data.corruptions.is_empty() && self.data.test_path.is_none() {
            return Err(Error::Config("data.corruptions is empty".into()));
        }
        for &kind in &self.data.corruptions {
            Corruption::new(kind, self.data.severity).map_err(config_err)?;
        }
        if self.model.path.is_some() && self.model.remote.is_some() {
            return Err(Error::Config(
                "model.path and model.remote are exclusive".into(),
            ));
        }
        if matches!(&self.model.remote, Some(cmd) if cmd.is_empty()) {
            return Err(Error::Config("model.remote needs a command".into()));
        }
        if self.grad_error.downsample == 0 || self.grad_error.samples == 0 {
            return Err(Error::Config(
                "grad_error.downsample and samples must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            epochs: self.run.epochs,
            batch_size: self.run.batch_size,
            seed: self.seed,
            shuffle: self.run.shuffle,
            zoo: self.zoo.clone(),
            optim: self.optim.clone(),
            objective: self.objective.clone(),
            selection: self.selection.clone(),
            online: self.online.clone(),
            pgd: self.pgd.clone(),
        }
    }
}
