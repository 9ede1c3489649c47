//! Forward-only comparison methods.
//!
//! DA-PL and DA-Direct train the adaptor with cross-entropy on every initial
//! pseudo-label. DA-PGD and DA-ZOO-Input estimate gradients in pixel space
//! instead of parameter space.

use std::time::Instant;

use rayon::prelude::*;

use super::metrics::EpochMetrics;
use super::offline::{
    accuracy, check_labels, epoch_order, initial_labels, train_loop, RunOutput, Targets,
};
use super::{keys, RunConfig};
use crate::adaptor::{AdaptorMode, AdaptorParams, DataAdaptor};
use crate::blackbox::{argmax, BlackBoxModel};
use crate::error::{Error, Result};
use crate::objectives::{soda_objective, ObjectiveConfig};
use crate::select::{select_reliable, Selection};
use crate::tensor::Tensor;
use crate::zoo::{estimate_with_base, ZooConfig};

/// DA-PL: cross-entropy against all initial pseudo-labels, no selection.
pub fn baseline_da_pl(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
    init: AdaptorParams,
) -> Result<RunOutput> {
    cfg.validate()?;
    check_labels(x, labels)?;
    let (records, pseudo, baseline_accuracy) = initial_labels(model, x, labels)?;
    let objective = ObjectiveConfig {
        alpha: 1.0,
        ..cfg.objective.clone()
    };
    let (theta, metrics) = train_loop(
        model,
        adaptor,
        x,
        labels,
        cfg,
        init,
        keys::DA_PL,
        &pseudo,
        Targets::AllLabeled,
        &objective,
    )?;
    Ok(RunOutput {
        theta,
        metrics,
        records,
        selection: Selection {
            reliable: (0..x.batch_size()).collect(),
            unreliable: Vec::new(),
        },
        baseline_accuracy,
    })
}

/// DA-Direct: DA-PL with an adaptor that generates the input outright.
pub fn baseline_da_direct(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
    init: AdaptorParams,
) -> Result<RunOutput> {
    if adaptor.mode() != AdaptorMode::Direct {
        return Err(Error::InvalidArgument(
            "DA-Direct needs a direct-mode adaptor".into(),
        ));
    }
    baseline_da_pl(model, adaptor, x, labels, cfg, init)
}

/// Per-member role in a pixel-space objective: `Some(label)` for reliable
/// members, `None` for unreliable ones.
type Roles = [Option<usize>];

fn split_value(probs: &[&[f64]], roles: &Roles, objective: &ObjectiveConfig) -> Result<f64> {
    let mut rel = Vec::new();
    let mut ys = Vec::new();
    let mut unrel = Vec::new();
    for (p, role) in probs.iter().zip(roles) {
        match role {
            Some(y) => {
                rel.push(*p);
                ys.push(*y);
            }
            None => unrel.push(*p),
        }
    }
    let no_l1 = ObjectiveConfig {
        beta: 0.0,
        ..objective.clone()
    };
    soda_objective(&rel, &ys, &unrel, &no_l1, None)
}

/// Estimates the gradient of the batch objective with respect to each
/// member's pixels. Member `i` is probed along its own directions while the
/// other members' predictions stay fixed. Costs `(q + 1)` queries per member.
pub(crate) fn pixel_gradients(
    model: &BlackBoxModel,
    inputs: &Tensor,
    roles: &Roles,
    objective: &ObjectiveConfig,
    zoo: &ZooConfig,
    key: &[u64],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let probs = model.query(inputs)?;
    let rows: Vec<&[f64]> = (0..probs.batch_size()).map(|i| probs.sample(i)).collect();
    let base = split_value(&rows, roles, objective)?;
    let grads = (0..inputs.batch_size())
        .into_par_iter()
        .map(|i| {
            let f = |z: &[f64]| -> Result<f64> {
                let pi = model.query_sample(z)?;
                let mut probed = rows.clone();
                probed[i] = &pi;
                split_value(&probed, roles, objective)
            };
            let mut k = key.to_vec();
            k.push(i as u64);
            let xi = Tensor::vector(inputs.sample(i).to_vec());
            estimate_with_base(f, &xi, base, zoo, &k).map(|e| e.delta.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, base))
}

fn roles_for(chunk: &[usize], selection: &Selection, pseudo: &[usize]) -> Vec<Option<usize>> {
    chunk
        .iter()
        .map(|&i| selection.is_reliable(i).then_some(pseudo[i]))
        .collect()
}

fn check_epoch_queries(used: u64, n: usize, q: usize) -> Result<()> {
    let expected = ((q + 1) * n) as u64;
    if used != expected {
        return Err(Error::Accounting {
            expected,
            actual: used,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PgdOutput {
    /// The perturbed test inputs.
    pub adapted: Tensor,
    pub metrics: Vec<EpochMetrics>,
    pub baseline_accuracy: Option<f64>,
}

impl PgdOutput {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics
            .last()
            .map_or(self.baseline_accuracy, |m| m.accuracy)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accuracy_of(model: &BlackBoxModel, x: &Tensor, labels: Option<&[usize]>) -> Result<Option<f64>> {
    match labels {
        Some(y) => {
            let p = model.query(x)?;
            let pred: Vec<usize> = (0..p.batch_size()).map(|i| argmax(p.sample(i)).0).collect();
            Ok(Some(accuracy(&pred, y)))
        }
        None => Ok(None),
    }
}

/// DA-PGD: a free per-sample perturbation updated by signed steps on the
/// pixel-space estimate of the SODA objective, kept inside `[0, 1]`.
pub fn baseline_da_pgd(
    model: &BlackBoxModel,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
) -> Result<PgdOutput> {
    cfg.validate()?;
    check_labels(x, labels)?;
    let n = x.batch_size();
    let zoo = cfg.zoo_for_run();
    let (records, pseudo, baseline_accuracy) = initial_labels(model, x, labels)?;
    let selection = select_reliable(&records, &cfg.selection, model.num_classes())?;
    let mut adapted = x.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let before = model.query_count();
        let mut objective_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in epoch_order(n, cfg, keys::PGD, epoch)
            .chunks(cfg.batch_size)
            .enumerate()
        {
            let inputs = adapted.select(chunk)?;
            let roles = roles_for(chunk, &selection, &pseudo);
            let key = [keys::PGD, epoch as u64, b as u64];
            let (grads, value) =
                pixel_gradients(model, &inputs, &roles, &cfg.objective, &zoo, &key)?;
            for (&i, g) in chunk.iter().zip(&grads) {
                for (v, gi) in adapted.sample_mut(i).iter_mut().zip(g) {
                    *v = (*v - cfg.pgd.step_size * sign(*gi)).clamp(0.0, 1.0);
                }
            }
            objective_sum += value;
            batches += 1;
        }
        let used = model.query_count() - before;
        check_epoch_queries(used, n, zoo.q)?;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            objective: Some(objective_sum / batches as f64),
            accuracy: accuracy_of(model, &adapted, labels)?,
            queries: used,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(PgdOutput {
        adapted,
        metrics,
        baseline_accuracy,
    })
}

/// DA-ZOO-Input: estimate the gradient with respect to the adapted pixels,
/// then back-propagate it through the adaptor to get a parameter update.
pub fn baseline_da_zoo_input(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
    init: AdaptorParams,
) -> Result<RunOutput> {
    cfg.validate()?;
    check_labels(x, labels)?;
    let n = x.batch_size();
    let zoo = cfg.zoo_for_run();
    let (records, pseudo, baseline_accuracy) = initial_labels(model, x, labels)?;
    let selection = select_reliable(&records, &cfg.selection, model.num_classes())?;
    let mut theta = init;
    let mut optim = cfg.optim.state(theta.len())?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let before = model.query_count();
        let mut objective_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in epoch_order(n, cfg, keys::ZOO_INPUT, epoch)
            .chunks(cfg.batch_size)
            .enumerate()
        {
            let xb = x.select(chunk)?;
            let adapted = adaptor.adapt(&theta, &xb)?;
            let roles = roles_for(chunk, &selection, &pseudo);
            let key = [keys::ZOO_INPUT, epoch as u64, b as u64];
            let (grads, value) =
                pixel_gradients(model, &adapted, &roles, &cfg.objective, &zoo, &key)?;
            let upstream = Tensor::new(xb.shape().to_vec(), grads.concat())?;
            let g = adaptor.param_grad(&theta, &xb, &upstream)?;
            optim
                .step(theta.data_mut(), &g)
                .map_err(|e| Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                })?;
            objective_sum += value;
            batches += 1;
        }
        let used = model.query_count() - before;
        check_epoch_queries(used, n, zoo.q)?;
        let acc = match labels {
            Some(y) => Some(accuracy(
                &crate::bench::predict(model, adaptor, &theta, x)?,
                y,
            )),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            objective: Some(objective_sum / batches as f64),
            accuracy: acc,
            queries: used,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(RunOutput {
        theta,
        metrics,
        records,
        selection,
        baseline_accuracy,
    })
}
