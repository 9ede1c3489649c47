//! Online adaptation: batches arrive one at a time and only a bounded
//! queue of confident past samples is kept.

use std::time::Instant;

use rand::seq::SliceRandom;

use super::metrics::EpochMetrics;
use super::offline::accuracy;
use super::step::{soda_gradient_estimate, SplitBatch};
use super::{keys, RunConfig};
use crate::adaptor::{AdaptorParams, DataAdaptor};
use crate::bench::predict;
use crate::blackbox::{BlackBoxModel, PseudoLabelRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::select::ReliableQueue;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OnlineOutput {
    pub theta: AdaptorParams,
    /// Predicted class per sample, in stream order.
    pub predictions: Vec<usize>,
    /// One row per batch.
    pub metrics: Vec<EpochMetrics>,
    /// Accuracy over all emitted predictions, when labels were supplied.
    pub accuracy: Option<f64>,
}

/// What happened on one queue push.
#[derive(Debug)]
pub struct PushEvent<'a> {
    pub batch: usize,
    pub record: PseudoLabelRecord,
    pub evicted: Option<PseudoLabelRecord>,
    pub queue: &'a ReliableQueue<Vec<f64>>,
}

/// Queries for one online batch of `l` samples with `stored` queued samples
/// and `unreliable` below-threshold members: pseudo-labelling, the training
/// epochs and the final predictions.
pub fn online_batch_queries(
    l: usize,
    stored: usize,
    unreliable: usize,
    q: usize,
    epochs: usize,
) -> u64 {
    (2 * l + epochs * (q + 1) * (stored + unreliable)) as u64
}

/// Splits a batch tensor into consecutive chunks of `batch_size` samples.
pub fn split_batches(x: &Tensor, batch_size: usize) -> Result<Vec<Tensor>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let idx: Vec<usize> = (0..x.batch_size()).collect();
    idx.chunks(batch_size).map(|c| x.select(c)).collect()
}

pub fn soda_online(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    batches: &[Tensor],
    labels: Option<&[Vec<usize>]>,
    cfg: &RunConfig,
    init: AdaptorParams,
) -> Result<OnlineOutput> {
    soda_online_observed(model, adaptor, batches, labels, cfg, init, |_| {})
}

/// [`soda_online`] with a callback after every queue push.
pub fn soda_online_observed<F>(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    batches: &[Tensor],
    labels: Option<&[Vec<usize>]>,
    cfg: &RunConfig,
    init: AdaptorParams,
    mut observe: F,
) -> Result<OnlineOutput>
where
    F: FnMut(PushEvent<'_>),
{
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Empty("batch stream"));
    }
    if let Some(l) = labels {
        if l.len() != batches.len()
            || l.iter()
                .zip(batches)
                .any(|(y, x)| y.len() != x.batch_size())
        {
            return Err(Error::InvalidArgument(
                "labels do not match the batch stream".into(),
            ));
        }
    }
    let zoo = cfg.zoo_for_run();
    let tau = cfg.selection.tau;
    let epochs = cfg.online.epochs_per_batch;
    let mut queue: ReliableQueue<Vec<f64>> =
        ReliableQueue::new(cfg.online.queue_size, model.num_classes())?;
    let mut theta = init;
    let mut optim = cfg.optim.state(theta.len())?;
    let mut predictions = Vec::new();
    let mut metrics = Vec::with_capacity(batches.len());

    for (t, xt) in batches.iter().enumerate() {
        let started = Instant::now();
        let before = model.query_count();
        let records = model.pseudo_label(xt)?;
        let mut unreliable = Vec::new();
        for r in &records {
            if r.confidence > tau {
                let evicted = queue.push(*r, xt.sample(r.sample_index).to_vec())?;
                queue.check_invariants()?;
                observe(PushEvent {
                    batch: t,
                    record: *r,
                    evicted: evicted.map(|e| e.record),
                    queue: &queue,
                });
            } else {
                unreliable.push(r.sample_index);
            }
        }

        let stored = queue.snapshot();
        // Reliable members first, then below-threshold members of this batch.
        let mut items: Vec<(&[f64], Option<usize>)> = stored
            .iter()
            .map(|e| (e.data.as_slice(), Some(e.record.class_id)))
            .collect();
        items.extend(unreliable.iter().map(|&i| (xt.sample(i), None)));

        let mut objective_sum = 0.0;
        let mut steps = 0;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..items.len()).collect();
            if cfg.shuffle {
                order.shuffle(&mut stream(
                    cfg.seed,
                    Purpose::Shuffle,
                    &[keys::ONLINE, t as u64, epoch as u64],
                ));
            }
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut split = SplitBatch::default();
                for &k in chunk {
                    match items[k] {
                        (x, Some(y)) => split.reliable.push((x, y)),
                        (x, None) => split.unreliable.push(x),
                    }
                }
                let key = [keys::ONLINE, t as u64, epoch as u64, b as u64];
                let est = soda_gradient_estimate(
                    model,
                    adaptor,
                    &theta,
                    &split,
                    &cfg.objective,
                    &zoo,
                    &key,
                )?;
                optim.step(theta.data_mut(), est.delta.data())?;
                objective_sum += est.value;
                steps += 1;
            }
        }
        if !theta.all_finite() {
            return Err(Error::Diverged {
                epoch: t,
                detail: "adaptor parameters became non-finite".into(),
            });
        }

        let pred = predict(model, adaptor, &theta, xt)?;
        let used = model.query_count() - before;
        let expected = online_batch_queries(
            xt.batch_size(),
            stored.len(),
            unreliable.len(),
            zoo.q,
            epochs,
        );
        if used != expected {
            return Err(Error::Accounting {
                expected,
                actual: used,
            });
        }
        metrics.push(EpochMetrics {
            epoch: t + 1,
            objective: (steps > 0).then(|| objective_sum / steps as f64),
            accuracy: labels.map(|l| accuracy(&pred, &l[t])),
            queries: used,
            seconds: started.elapsed().as_secs_f64(),
        });
        predictions.extend(pred);
    }

    let accuracy = labels.map(|l| {
        let flat: Vec<usize> = l.iter().flatten().copied().collect();
        accuracy(&predictions, &flat)
    });
    Ok(OnlineOutput {
        theta,
        predictions,
        metrics,
        accuracy,
    })
}
