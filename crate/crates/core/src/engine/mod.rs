//! Adaptation runs: offline and online training of the adaptor, the
//! forward-only baselines, and the gradient-error measurement.

mod baselines;
mod grad_error;
mod metrics;
mod offline;
mod online;
mod step;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;
use crate::rng::{derive_seed, Purpose};
use crate::select::SelectionConfig;
use crate::zoo::{OptimState, ZooConfig};

pub use baselines::{
    baseline_da_direct, baseline_da_pgd, baseline_da_pl, baseline_da_zoo_input, PgdOutput,
};
pub use grad_error::{grad_error_experiment, GradErrorReport, GradErrorSpec, MeanCi, TrialErrors};
pub use metrics::{write_metrics_csv, EpochMetrics};
pub use offline::{offline_epoch_queries, soda_offline, RunOutput};
pub use online::{
    online_batch_queries, soda_online, soda_online_observed, split_batches, OnlineOutput, PushEvent,
};
pub use step::{soda_gradient_estimate, soda_value, SplitBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl OptimConfig {
    pub fn state(&self, dim: usize) -> Result<OptimState> {
        OptimState::new(self.learning_rate, self.momentum, self.weight_decay, dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub queue_size: usize,
    pub epochs_per_batch: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            queue_size: 1000,
            epochs_per_batch: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    /// Signed step applied to each pixel per update.
    pub step_size: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { step_size: 1e-3 }
    }
}

/// Everything an adaptation run needs besides the data and the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Reshuffle batch composition every epoch.
    pub shuffle: bool,
    pub zoo: ZooConfig,
    pub optim: OptimConfig,
    pub objective: ObjectiveConfig,
    pub selection: SelectionConfig,
    pub online: OnlineConfig,
    pub pgd: PgdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            seed: 0,
            shuffle: true,
            zoo: ZooConfig::default(),
            optim: OptimConfig::default(),
            objective: ObjectiveConfig::default(),
            selection: SelectionConfig::default(),
            online: OnlineConfig::default(),
            pgd: PgdConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be at least 1".into()));
        }
        self.zoo.validate()?;
        self.objective.validate()?;
        self.selection.validate()?;
        OptimState::new(
            self.optim.learning_rate,
            self.optim.momentum,
            self.optim.weight_decay,
            0,
        )?;
        if self.online.epochs_per_batch == 0 {
            return Err(Error::Config(
                "online.epochs_per_batch must be at least 1".into(),
            ));
        }
        if !(self.pgd.step_size > 0.0 && self.pgd.step_size.is_finite()) {
            return Err(Error::Config("pgd.step_size must be positive".into()));
        }
        Ok(())
    }

    /// Estimator settings with the direction seed derived from the run seed.
    pub fn zoo_for_run(&self) -> ZooConfig {
        ZooConfig {
            seed: derive_seed(self.seed, Purpose::Direction, &[]),
            ..self.zoo.clone()
        }
    }
}

/// Stream labels separating the estimators of one run.
pub(crate) mod keys {
    pub const OFFLINE: u64 = 1;
    pub const ONLINE: u64 = 2;
    pub const DA_PL: u64 = 3;
    pub const PGD: u64 = 4;
    pub const ZOO_INPUT: u64 = 5;
    pub const GRAD_NAIVE: u64 = 6;
    pub const GRAD_ROBUST: u64 = 7;
}
