//! Measures how far ZOO estimates land from the exact gradient under noisy
//! pseudo-labels, for the naive all-labeled objective and the robust split.
//!
//! The exact gradients come from a finite-difference Jacobian of the model
//! outputs with respect to the adaptor parameters, so the adaptor has to be
//! small.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::step::{soda_gradient_estimate, SplitBatch};
use super::{keys, RunConfig};
use crate::adaptor::DataAdaptor;
use crate::blackbox::{BlackBoxModel, PseudoLabelRecord};
use crate::error::{Error, Result};
use crate::objectives::{
    cross_entropy_class, cross_entropy_class_grad, mutual_information_grad, ObjectiveConfig,
};
use crate::rng::{stream, Purpose};
use crate::select::{select_reliable, SelectionConfig};
use crate::tensor::Tensor;
use crate::zoo::batch_estimate;

/// Largest parameter count the finite-difference oracle accepts.
pub const MAX_ORACLE_DIM: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradErrorSpec {
    /// Probability that a label is replaced by a uniformly drawn other class.
    pub flip_rate: f64,
    pub trials: usize,
    pub selection: SelectionConfig,
    /// CE weight in the robust objective. The naive objective has weight 1.
    pub alpha: f64,
    /// Central-difference step for the Jacobian.
    pub fd_step: f64,
}

impl Default for GradErrorSpec {
    fn default() -> Self {
        Self {
            flip_rate: 0.4,
            trials: 200,
            selection: SelectionConfig::default(),
            alpha: 1.0,
            fd_step: 1e-5,
        }
    }
}

impl GradErrorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return Err(Error::Config(format!(
                "flip_rate must lie in [0, 1], got {}",
                self.flip_rate
            )));
        }
        if self.trials < 2 {
            return Err(Error::Config("grad error needs at least 2 trials".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::Config("fd_step must be positive".into()));
        }
        self.selection.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialErrors {
    pub trial: usize,
    /// Labels that differ from the clean ones.
    pub flipped: usize,
    /// Size of the reliable subset chosen from the noisy labels.
    pub reliable: usize,
    pub naive: f64,
    pub robust: f64,
}

/// Mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub std_err: f64,
    pub lo: f64,
    pub hi: f64,
}

impl MeanCi {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let std_err = (var / n).sqrt();
        Self {
            mean,
            std_err,
            lo: mean - 1.96 * std_err,
            hi: mean + 1.96 * std_err,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradErrorReport {
    pub trials: Vec<TrialErrors>,
    pub naive: MeanCi,
    pub robust: MeanCi,
    /// Paired `robust - naive`.
    pub difference: MeanCi,
    pub queries: u64,
}

/// `J[i][k]` is the gradient of `p_ik` with respect to theta, by central
/// differences.
fn jacobian(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    theta: &[f64],
    x: &Tensor,
    h: f64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = theta.len();
    let n = x.batch_size();
    let c = model.num_classes();
    let mut jac = vec![vec![vec![0.0; d]; c]; n];
    let probs_at = |t: &[f64]| -> Result<Tensor> { model.query(&adaptor.bind(t)?.adapt(x)?) };
    let mut t = theta.to_vec();
    for j in 0..d {
        t[j] = theta[j] + h;
        let plus = probs_at(&t)?;
        t[j] = theta[j] - h;
        let minus = probs_at(&t)?;
        t[j] = theta[j];
        for (i, rows) in jac.iter_mut().enumerate() {
            for (k, g) in rows.iter_mut().enumerate() {
                g[j] = (plus.sample(i)[k] - minus.sample(i)[k]) / (2.0 * h);
            }
        }
    }
    Ok(jac)
}

/// Chains `dL/dp_i` through the Jacobian rows of the listed samples.
fn chain(
    jac: &[Vec<Vec<f64>>],
    members: &[usize],
    dl_dp: &[Vec<f64>],
    scale: f64,
    out: &mut [f64],
) {
    for (&i, g) in members.iter().zip(dl_dp) {
        for (row, gk) in jac[i].iter().zip(g) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += scale * gk * r;
            }
        }
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn flip_labels(labels: &[usize], classes: usize, rate: f64, seed: u64, trial: usize) -> Vec<usize> {
    let mut rng = stream(seed, Purpose::LabelNoise, &[trial as u64]);
    labels
        .iter()
        .map(|&y| {
            if rng.random::<f64>() < rate {
                let other = rng.random_range(0..classes - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect()
}

/// Runs `spec.trials` trials at the adaptor's seeded initial parameters.
///
/// Each trial draws noisy labels from the clean `labels`, then compares
/// (a) the ZOO estimate of mean CE against the noisy labels over all of `x`
/// and (b) the ZOO estimate of `-MI(unreliable) + alpha * mean CE(reliable)`
/// with the split chosen from the noisy labels, each against the exact
/// gradient of its own objective.
pub fn grad_error_experiment(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    x: &Tensor,
    labels: &[usize],
    spec: &GradErrorSpec,
    cfg: &RunConfig,
) -> Result<GradErrorReport> {
    spec.validate()?;
    cfg.validate()?;
    let d = adaptor.param_count();
    if d > MAX_ORACLE_DIM {
        return Err(Error::InvalidArgument(format!(
            "adaptor has {d} parameters; the finite-difference oracle allows at most {MAX_ORACLE_DIM}"
        )));
    }
    let n = x.batch_size();
    if n == 0 {
        return Err(Error::Empty("grad error inputs"));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    let classes = model.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {classes} classes"
        )));
    }

    let start = model.query_count();
    let zoo = cfg.zoo_for_run();
    let floor = cfg.objective.log_floor;
    let theta = adaptor.init_params(cfg.seed);
    let probs = model.query(&adaptor.adapt(&theta, x)?)?;
    let jac = jacobian(model, adaptor, theta.data(), x, spec.fd_step)?;
    let robust_cfg = ObjectiveConfig {
        alpha: spec.alpha,
        beta: 0.0,
        log_floor: floor,
    };

    let mut trials = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials {
        let noisy = flip_labels(labels, classes, spec.flip_rate, cfg.seed, t);
        let flipped = noisy.iter().zip(labels).filter(|(a, b)| a != b).count();

        // Naive: every sample, CE against its noisy label.
        let objectives: Vec<_> = (0..n)
            .map(|i| {
                let (xi, y) = (x.sample(i), noisy[i]);
                move |th: &[f64]| -> Result<f64> {
                    let a = adaptor.bind(th)?.adapt_sample(xi)?;
                    cross_entropy_class(y, &model.query_sample(&a)?, floor)
                }
            })
            .collect();
        let naive_est = batch_estimate(&objectives, &theta, &zoo, &[keys::GRAD_NAIVE, t as u64])?;
        let all: Vec<usize> = (0..n).collect();
        let ce_grads: Vec<Vec<f64>> = all
            .iter()
            .map(|&i| cross_entropy_class_grad(noisy[i], probs.sample(i)))
            .collect();
        let mut naive_true = vec![0.0; d];
        chain(&jac, &all, &ce_grads, 1.0 / n as f64, &mut naive_true);

        // Robust: split by confidence in the noisy label.
        let records: Vec<PseudoLabelRecord> = (0..n)
            .map(|i| PseudoLabelRecord {
                sample_index: i,
                class_id: noisy[i],
                confidence: probs.sample(i)[noisy[i]],
            })
            .collect();
        let selection = select_reliable(&records, &spec.selection, classes)?;
        let split = SplitBatch {
            reliable: selection
                .reliable
                .iter()
                .map(|&i| (x.sample(i), noisy[i]))
                .collect(),
            unreliable: selection.unreliable.iter().map(|&i| x.sample(i)).collect(),
        };
        let robust_est = soda_gradient_estimate(
            model,
            adaptor,
            &theta,
            &split,
            &robust_cfg,
            &zoo,
            &[keys::GRAD_ROBUST, t as u64],
        )?;
        let mut robust_true = vec![0.0; d];
        if !selection.reliable.is_empty() {
            let g: Vec<Vec<f64>> = selection
                .reliable
                .iter()
                .map(|&i| cross_entropy_class_grad(noisy[i], probs.sample(i)))
                .collect();
            let scale = spec.alpha / selection.reliable.len() as f64;
            chain(&jac, &selection.reliable, &g, scale, &mut robust_true);
        }
        if !selection.unreliable.is_empty() {
            let rows: Vec<&[f64]> = selection
                .unreliable
                .iter()
                .map(|&i| probs.sample(i))
                .collect();
            let g = mutual_information_grad(&rows)?;
            chain(&jac, &selection.unreliable, &g, -1.0, &mut robust_true);
        }

        let naive = l2_distance(naive_est.delta.data(), &naive_true);
        let robust = l2_distance(robust_est.delta.data(), &robust_true);
        if !(naive.is_finite() && robust.is_finite()) {
            return Err(Error::non_finite(format!("gradient error in trial {t}")));
        }
        trials.push(TrialErrors {
            trial: t,
            flipped,
            reliable: selection.reliable.len(),
            naive,
            robust,
        });
    }

    let naive: Vec<f64> = trials.iter().map(|t| t.naive).collect();
    let robust: Vec<f64> = trials.iter().map(|t| t.robust).collect();
    let diff: Vec<f64> = trials.iter().map(|t| t.robust - t.naive).collect();
    Ok(GradErrorReport {
        naive: MeanCi::of(&naive),
        robust: MeanCi::of(&robust),
        difference: MeanCi::of(&diff),
        trials,
        queries: model.query_count() - start,
    })
}
