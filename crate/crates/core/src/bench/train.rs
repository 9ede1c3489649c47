//! Training the reference deployed model and measuring accuracy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::ShapeDataset;
use crate::adaptor::{AdaptorParams, DataAdaptor};
use crate::blackbox::{argmax, BlackBoxModel};
use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, Layer, Network};
use crate::objectives::safe_ln;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Two strided conv layers and a dense softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            conv1_channels: 16,
            conv2_channels: 32,
        }
    }
}

impl ArchSpec {
    pub fn build(&self, input_shape: &[usize], classes: usize) -> Result<Network> {
        let &[c, h, w] = input_shape else {
            return Err(Error::InvalidArgument(format!(
                "expected [c, h, w], got {input_shape:?}"
            )));
        };
        let strided = |i, o| Conv2dSpec {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let (h4, w4) = (h2.div_ceil(2), w2.div_ceil(2));
        Network::new(
            input_shape.to_vec(),
            vec![
                Layer::conv2d(strided(c, self.conv1_channels)),
                Layer::Relu,
                Layer::conv2d(strided(self.conv1_channels, self.conv2_channels)),
                Layer::Relu,
                Layer::dense(self.conv2_channels * h4 * w4, classes),
                Layer::Softmax,
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// First-order SGD with momentum on cross-entropy.
pub fn train_network(
    ds: &ShapeDataset,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Network, TrainReport)> {
    if ds.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Empty("training set or batch"));
    }
    let mut net = arch.build(ds.sample_shape(), ds.num_classes)?;
    net.init_params(&mut stream(seed, Purpose::Training, &[0]));
    let mut params = net.params_vec();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, Purpose::Shuffle, &[epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = ds.images.select(chunk)?;
            let p = net.forward(&x)?;
            let c = ds.num_classes;
            let mut up = vec![0.0; chunk.len() * c];
            for (j, &i) in chunk.iter().enumerate() {
                let y = ds.labels[i];
                let py = p.sample(j)[y];
                total -= safe_ln(py, 1e-12);
                up[j * c + y] = -1.0 / (py.max(1e-12) * chunk.len() as f64);
            }
            let up = Tensor::new(p.shape().to_vec(), up)?;
            let grads = net.backward(&x, &up)?;
            for ((w, v), g) in params
                .iter_mut()
                .zip(&mut velocity)
                .zip(grads.params.data())
            {
                *v = cfg.momentum * *v + g;
                *w -= cfg.learning_rate * *v;
            }
            net.set_params(&params)?;
        }
        let mean = total / ds.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("training loss is {mean}"),
            });
        }
        losses.push(mean);
    }
    let train_accuracy = network_accuracy(&net, ds)?;
    Ok((
        net,
        TrainReport {
            losses,
            train_accuracy,
        },
    ))
}

/// Trains and seals the model; only queries are possible afterwards.
pub fn train_deployed(
    ds: &ShapeDataset,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BlackBoxModel> {
    let (net, _) = train_network(ds, arch, cfg, seed)?;
    BlackBoxModel::from_network(net)
}

fn network_accuracy(net: &Network, ds: &ShapeDataset) -> Result<f64> {
    let p = net.forward(&ds.images)?;
    Ok(count_correct(&p, &ds.labels) as f64 / ds.len() as f64)
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.sample(*i)).0 == y)
        .count()
}

const EVAL_CHUNK: usize = 256;

/// Argmax accuracy of `model` on adapted test data. Costs one query per sample.
pub fn evaluate(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    theta: &AdaptorParams,
    ds: &ShapeDataset,
) -> Result<f64> {
    let preds = predict(model, adaptor, theta, &ds.images)?;
    let correct = preds.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Predicted classes for adapted inputs.
pub fn predict(
    model: &BlackBoxModel,
    adaptor: &DataAdaptor,
    theta: &AdaptorParams,
    x: &Tensor,
) -> Result<Vec<usize>> {
    let bound = adaptor.bind(theta.data())?;
    let mut out = Vec::with_capacity(x.batch_size());
    let all: Vec<usize> = (0..x.batch_size()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let p = model.query(&bound.adapt(&x.select(chunk)?)?)?;
        out.extend((0..chunk.len()).map(|j| argmax(p.sample(j)).0));
    }
    Ok(out)
}

/// Accuracy of the raw model without any adaptor.
pub fn evaluate_raw(model: &BlackBoxModel, ds: &ShapeDataset) -> Result<f64> {
    let p = model.query(&ds.images)?;
    Ok(count_correct(&p, &ds.labels) as f64 / ds.len() as f64)
}
