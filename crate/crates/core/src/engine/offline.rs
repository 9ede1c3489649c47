//! Offline adaptation: pseudo-label once, freeze the reliable split, then
//! run epochs of ZO-SGD over shuffled mini-batches.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::metrics::EpochMetrics;
use super::step::{soda_gradient_estimate, SplitBatch};
use super::{keys, RunConfig};
use crate::adaptor::{AdaptorParams, DataAdaptor};
use crate::bench::predict;
use crate::blackbox::{BlackBoxModel, PseudoLabelRecord};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;
use crate::rng::{stream, Purpose};
use crate::select::{select_reliable, Selection};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub theta: AdaptorParams,
    pub metrics: Vec<EpochMetrics>,
    /// Pseudo-labels from the unadapted model.
    pub records: Vec<PseudoLabelRecord>,
    pub selection: Selection,
    /// Raw model accuracy before adaptation, when labels were supplied.
    pub baseline_accuracy: Option<f64>,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics
            .last()
            .map_or(self.baseline_accuracy, |m| m.accuracy)
    }
}

/// Adaptation queries in one offline epoch over `n` samples.
pub fn offline_epoch_queries(n: usize, q: usize) -> u64 {
    ((q + 1) * n) as u64
}

fn selection_hash(s: &Selection) -> u64 {
    let mut h = DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub(crate) fn check_labels(x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    match labels {
        Some(l) if l.len() != x.batch_size() => Err(Error::LengthMismatch {
            expected: x.batch_size(),
            actual: l.len(),
        }),
        _ => Ok(()),
    }
}

/// Batch order for one epoch.
pub(crate) fn epoch_order(n: usize, cfg: &RunConfig, tag: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(&mut stream(
            cfg.seed,
            Purpose::Shuffle,
            &[tag, epoch as u64],
        ));
    }
    order
}

/// How batch members are split and weighted in a training loop.
pub(crate) enum Targets<'a> {
    /// Reliable members get CE, unreliable ones MI.
    Split(&'a Selection),
    /// Every member gets CE against its pseudo-label.
    AllLabeled,
}

/// The shared epoch loop behind offline SODA and DA-PL / DA-Direct.
pub(crate) fn train_loop(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
    init: AdaptorParams,
    tag: u64,
    pseudo: &[usize],
    targets: Targets<'_>,
    objective: &ObjectiveConfig,
) -> Result<(AdaptorParams, Vec<EpochMetrics>)> {
    let n = x.batch_size();
    let zoo = cfg.zoo_for_run();
    let mut theta = init;
    let mut optim = cfg.optim.state(theta.len())?;
    let frozen = match targets {
        Targets::Split(s) => Some((s, selection_hash(s))),
        Targets::AllLabeled => None,
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if let Some((s, h)) = frozen {
            if selection_hash(s) != h {
                return Err(Error::InvalidArgument(
                    "reliable partition changed after selection".into(),
                ));
            }
        }
        let order = epoch_order(n, cfg, tag, epoch);
        let before = model.query_count();
        let mut objective_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut split = SplitBatch::default();
            for &i in chunk {
                let reliable = frozen.is_none_or(|(s, _)| s.is_reliable(i));
                if reliable {
                    split.reliable.push((x.sample(i), pseudo[i]));
                } else {
                    split.unreliable.push(x.sample(i));
                }
            }
            let key = [tag, epoch as u64, b as u64];
            let est = soda_gradient_estimate(model, adaptor, &theta, &split, objective, &zoo, &key)
                .map_err(|e| diverged(epoch, e))?;
            optim
                .step(theta.data_mut(), est.delta.data())
                .map_err(|e| diverged(epoch, e))?;
            objective_sum += est.value;
            batches += 1;
        }
        let used = model.query_count() - before;
        let expected = offline_epoch_queries(n, zoo.q);
        if used != expected {
            return Err(Error::Accounting {
                expected,
                actual: used,
            });
        }
        if !theta.all_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "adaptor parameters became non-finite".into(),
            });
        }
        let acc = match labels {
            Some(y) => Some(accuracy(&predict(model, adaptor, &theta, x)?, y)),
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
    Ok((theta, metrics))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Estimation { .. } | Error::NonFinite { .. } => Error::Diverged {
            epoch,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Pseudo-labels `x` with the unadapted model (one query per sample).
pub(crate) fn initial_labels(
    model: &BlackBoxModel,
    x: &Tensor,
    labels: Option<&[usize]>,
) -> Result<(Vec<PseudoLabelRecord>, Vec<usize>, Option<f64>)> {
    let records = model.pseudo_label(x)?;
    let pseudo: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    let baseline = labels.map(|y| accuracy(&pseudo, y));
    Ok((records, pseudo, baseline))
}

/// Offline SODA. `labels` are used only for reporting accuracy.
pub fn soda_offline(
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
    let selection = select_reliable(&records, &cfg.selection, model.num_classes())?;
    let (theta, metrics) = train_loop(
        model,
        adaptor,
        x,
        labels,
        cfg,
        init,
        keys::OFFLINE,
        &pseudo,
        Targets::Split(&selection),
        &cfg.objective,
    )?;
    Ok(RunOutput {
        theta,
        metrics,
        records,
        selection,
        baseline_accuracy,
    })
}
