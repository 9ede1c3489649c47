//! One SODA gradient estimate over a split mini-batch.

use crate::adaptor::DataAdaptor;
use crate::blackbox::BlackBoxModel;
use crate::error::{Error, Result};
use crate::objectives::{
    cross_entropy_class, l1_perturbation, mutual_information_tensor, soda_objective,
    ObjectiveConfig,
};
use crate::tensor::Tensor;
use crate::zoo::{batch_estimate, multi_point_estimate, GradEstimate, ZooConfig};

/// A mini-batch after the reliability split: reliable members carry their
/// pseudo-label.
#[derive(Debug, Clone, Default)]
pub struct SplitBatch<'a> {
    pub reliable: Vec<(&'a [f64], usize)>,
    pub unreliable: Vec<&'a [f64]>,
}

impl SplitBatch<'_> {
    pub fn len(&self) -> usize {
        self.reliable.len() + self.unreliable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Estimates the gradient of `-MI(unreliable) + alpha * mean CE(reliable)
/// (+ beta * L1)` at `theta`.
///
/// The MI term is estimated at batch level (each probe re-queries every
/// unreliable member); the CE term is averaged from per-sample estimates
/// with their own directions. Costs `(q + 1)` queries per batch member.
pub fn soda_gradient_estimate(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    theta: &Tensor,
    batch: &SplitBatch<'_>,
    objective: &ObjectiveConfig,
    zoo: &ZooConfig,
    key: &[u64],
) -> Result<GradEstimate> {
    if batch.is_empty() {
        return Err(Error::Empty("mini-batch"));
    }
    let l = batch.len() as f64;
    let floor = objective.log_floor;
    let shape = adaptor.input_shape();
    let mut delta = vec![0.0; theta.len()];
    let mut value = 0.0;
    let mut queries = 0;
    let with_key = |tag: u64| {
        let mut k = key.to_vec();
        k.push(tag);
        k
    };

    if !batch.unreliable.is_empty() {
        let xu = Tensor::stack(shape, &batch.unreliable)?;
        let w_l1 = objective.beta * batch.unreliable.len() as f64 / l;
        let f = |t: &[f64]| -> Result<f64> {
            let adapted = adaptor.bind(t)?.adapt(&xu)?;
            let p = model.query(&adapted)?;
            let mut v = -mutual_information_tensor(&p, floor)?;
            if w_l1 > 0.0 {
                v += w_l1 * l1_perturbation(&adapted, &xu)?;
            }
            Ok(v)
        };
        let e = multi_point_estimate(f, theta, zoo, &with_key(0))?;
        delta
            .iter_mut()
            .zip(e.delta.data())
            .for_each(|(d, v)| *d += v);
        value += e.value;
        queries += e.queries_used * batch.unreliable.len() as u64;
    }

    if !batch.reliable.is_empty() {
        let w_l1 = objective.beta * batch.reliable.len() as f64 / l;
        let alpha = objective.alpha;
        let objectives: Vec<_> = batch
            .reliable
            .iter()
            .map(|&(x, y)| {
                move |t: &[f64]| -> Result<f64> {
                    let a = adaptor.bind(t)?.adapt_sample(x)?;
                    let p = model.query_sample(&a)?;
                    let mut v = alpha * cross_entropy_class(y, &p, floor)?;
                    if w_l1 > 0.0 {
                        v += w_l1 * l1(&a, x);
                    }
                    Ok(v)
                }
            })
            .collect();
        let e = batch_estimate(&objectives, theta, zoo, &with_key(1))?;
        delta
            .iter_mut()
            .zip(e.delta.data())
            .for_each(|(d, v)| *d += v);
        value += e.value;
        queries += e.queries_used;
    }

    Ok(GradEstimate {
        delta: Tensor::vector(delta),
        queries_used: queries,
        value,
    })
}

/// The exact objective the estimator targets, evaluated by direct queries.
pub fn soda_value(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    theta: &[f64],
    batch: &SplitBatch<'_>,
    objective: &ObjectiveConfig,
) -> Result<f64> {
    let bound = adaptor.bind(theta)?;
    let shape = adaptor.input_shape();
    let run = |rows: &[&[f64]]| -> Result<Option<(Tensor, Tensor, Tensor)>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let x = Tensor::stack(shape, rows)?;
        let a = bound.adapt(&x)?;
        let p = model.query(&a)?;
        Ok(Some((x, a, p)))
    };
    let rel_x: Vec<&[f64]> = batch.reliable.iter().map(|(x, _)| *x).collect();
    let labels: Vec<usize> = batch.reliable.iter().map(|(_, y)| *y).collect();
    let r = run(&rel_x)?;
    let u = run(&batch.unreliable)?;
    let rows = |t: &Option<(Tensor, Tensor, Tensor)>| -> Vec<Vec<f64>> {
        t.as_ref()
            .map(|(_, _, p)| (0..p.batch_size()).map(|i| p.sample(i).to_vec()).collect())
            .unwrap_or_default()
    };
    let (pr, pu) = (rows(&r), rows(&u));
    let pr: Vec<&[f64]> = pr.iter().map(Vec::as_slice).collect();
    let pu: Vec<&[f64]> = pu.iter().map(Vec::as_slice).collect();
    let no_l1 = ObjectiveConfig {
        beta: 0.0,
        ..objective.clone()
    };
    let mut v = soda_objective(&pr, &labels, &pu, &no_l1, None)?;
    if objective.beta > 0.0 {
        let total: f64 = [&r, &u]
            .into_iter()
            .flatten()
            .map(|(x, a, _)| l1(a.data(), x.data()))
            .sum();
        v += objective.beta * total / batch.len() as f64;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptor::AdaptorConfig;
    use crate::nn::{Layer, Network};
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    fn setup() -> (BlackBoxModel, DataAdaptor, Vec<Vec<f64>>) {
        let mut net =
            Network::new(vec![1, 4, 4], vec![Layer::dense(16, 3), Layer::Softmax]).unwrap();
        net.init_params(&mut stream(1, Purpose::Training, &[]));
        let model = BlackBoxModel::from_network(net).unwrap();
        let cfg = AdaptorConfig {
            hidden_channels: 1,
            clamp: false,
            ..Default::default()
        };
        let adaptor = DataAdaptor::new(&[1, 4, 4], &cfg).unwrap();
        let mut rng = stream(2, Purpose::Dataset, &[]);
        let xs = (0..6)
            .map(|_| (0..16).map(|_| rng.random::<f64>()).collect())
            .collect();
        (model, adaptor, xs)
    }

    #[test]
    fn queries_are_q_plus_one_per_member() {
        let (model, adaptor, xs) = setup();
        let batch = SplitBatch {
            reliable: vec![(&xs[0], 1), (&xs[1], 2)],
            unreliable: xs[2..].iter().map(Vec::as_slice).collect(),
        };
        let zoo = ZooConfig {
            q: 4,
            ..Default::default()
        };
        let theta = adaptor.init_params(3);
        let e = soda_gradient_estimate(
            &model,
            &adaptor,
            &theta,
            &batch,
            &ObjectiveConfig::default(),
            &zoo,
            &[0],
        )
        .unwrap();
        assert_eq!(model.query_count(), 5 * 6);
        assert_eq!(e.queries_used, 30);
        let v = soda_value(
            &model,
            &adaptor,
            theta.data(),
            &batch,
            &ObjectiveConfig::default(),
        )
        .unwrap();
        assert!((v - e.value).abs() < 1e-12);
    }

    #[test]
    fn value_includes_l1_term() {
        let (model, adaptor, xs) = setup();
        let batch = SplitBatch {
            reliable: vec![(&xs[0], 0)],
            unreliable: vec![&xs[1], &xs[2]],
        };
        let obj = ObjectiveConfig {
            beta: 0.5,
            ..Default::default()
        };
        let theta = adaptor.init_params(4);
        let zoo = ZooConfig {
            q: 2,
            ..Default::default()
        };
        let e = soda_gradient_estimate(&model, &adaptor, &theta, &batch, &obj, &zoo, &[1]).unwrap();
        let v = soda_value(&model, &adaptor, theta.data(), &batch, &obj).unwrap();
        assert!((v - e.value).abs() < 1e-12);
        let plain = soda_value(
            &model,
            &adaptor,
            theta.data(),
            &batch,
            &ObjectiveConfig::default(),
        )
        .unwrap();
        assert!(v > plain);
    }

    #[test]
    fn empty_batch_rejected() {
        let (model, adaptor, _) = setup();
        let theta = adaptor.zero_params();
        let r = soda_gradient_estimate(
            &model,
            &adaptor,
            &theta,
            &SplitBatch::default(),
            &ObjectiveConfig::default(),
            &ZooConfig::default(),
            &[],
        );
        assert!(matches!(r, Err(Error::Empty(_))));
    }
}
