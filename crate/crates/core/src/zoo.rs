//! Multi-point zeroth-order gradient estimation and the ZO-SGD update.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooConfig {
    /// Directions per estimate.
    pub q: usize,
    /// Finite-difference step along each direction.
    pub mu: f64,
    /// Root of the direction streams. Run configs derive it from the run
    /// seed, so it is not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Pair every drawn direction with its negation.
    pub antithetic: bool,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            q: 5,
            mu: 1e-3,
            seed: 0,
            antithetic: false,
        }
    }
}

impl ZooConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Config("zoo.q must be at least 1".into()));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "zoo.mu must be positive, got {}",
                self.mu
            )));
        }
        if self.antithetic && !self.q.is_multiple_of(2) {
            return Err(Error::Config(
                "zoo.q must be even when antithetic pairs are enabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub delta: Tensor,
    /// Objective evaluations spent, counting the shared baseline once per sample.
    pub queries_used: u64,
    /// Objective value at the unperturbed point (averaged over samples).
    pub value: f64,
}

/// Draws direction `j` for the stream addressed by `key`.
///
/// With antithetic pairs, directions `2m` and `2m + 1` are `u_m` and `-u_m`.
pub fn direction(cfg: &ZooConfig, key: &[u64], j: usize, dim: usize) -> Vec<f64> {
    let (index, sign) = if cfg.antithetic {
        (j / 2, if j.is_multiple_of(2) { 1.0 } else { -1.0 })
    } else {
        (j, 1.0)
    };
    let mut full = key.to_vec();
    full.push(index as u64);
    let mut rng = stream(cfg.seed, Purpose::Direction, &full);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sign * z
        })
        .collect()
}

fn perturbed(theta: &[f64], u: &[f64], mu: f64) -> Vec<f64> {
    theta.iter().zip(u).map(|(t, d)| t + mu * d).collect()
}

/// Estimates the gradient of `f` at `theta` from `q` random directions.
///
/// `key` addresses the direction streams (e.g. `[epoch, batch, sample]`).
/// Evaluations may run in parallel; the reduction is always in direction
/// order.
pub fn multi_point_estimate<F>(
    f: F,
    theta: &Tensor,
    cfg: &ZooConfig,
    key: &[u64],
) -> Result<GradEstimate>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let base = f(theta.data())?;
    let mut est = estimate_with_base(f, theta, base, cfg, key)?;
    est.queries_used += 1;
    Ok(est)
}

/// Like [`multi_point_estimate`] but with the unperturbed value supplied by
/// the caller, so only the `q` probes are evaluated.
pub fn estimate_with_base<F>(
    f: F,
    theta: &Tensor,
    base: f64,
    cfg: &ZooConfig,
    key: &[u64],
) -> Result<GradEstimate>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    if !base.is_finite() {
        return Err(Error::non_finite("objective at the unperturbed point"));
    }
    let theta = theta.data();
    let d = theta.len();
    let probes: Vec<(Vec<f64>, f64)> = (0..cfg.q)
        .into_par_iter()
        .map(|j| {
            let u = direction(cfg, key, j, d);
            let v = f(&perturbed(theta, &u, cfg.mu))?;
            if !v.is_finite() {
                return Err(Error::Estimation { direction: j });
            }
            Ok((u, v))
        })
        .collect::<Result<_>>()?;
    let mut delta = vec![0.0; d];
    let scale = 1.0 / (cfg.mu * cfg.q as f64);
    for (u, v) in &probes {
        let w = (v - base) * scale;
        for (acc, ui) in delta.iter_mut().zip(u) {
            *acc += w * ui;
        }
    }
    Ok(GradEstimate {
        delta: Tensor::vector(delta),
        queries_used: cfg.q as u64,
        value: base,
    })
}

/// Averages per-sample estimates, each with its own fresh directions.
///
/// Sample `i` draws from the stream keyed by `key ++ [i]`.
pub fn batch_estimate<F>(
    objectives: &[F],
    theta: &Tensor,
    cfg: &ZooConfig,
    key: &[u64],
) -> Result<GradEstimate>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if objectives.is_empty() {
        return Err(Error::Empty("batch_estimate needs at least one objective"));
    }
    let estimates: Vec<GradEstimate> = objectives
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut k = key.to_vec();
            k.push(i as u64);
            multi_point_estimate(f, theta, cfg, &k)
        })
        .collect::<Result<_>>()?;
    let l = estimates.len() as f64;
    let mut delta = vec![0.0; theta.len()];
    let mut value = 0.0;
    let mut queries = 0;
    for e in &estimates {
        for (acc, v) in delta.iter_mut().zip(e.delta.data()) {
            *acc += v / l;
        }
        value += e.value / l;
        queries += e.queries_used;
    }
    Ok(GradEstimate {
        delta: Tensor::vector(delta),
        queries_used: queries,
        value,
    })
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(eta: f64, momentum: f64, weight_decay: f64, dim: usize) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be nonnegative, got {eta}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(Self {
            eta,
            momentum,
            weight_decay,
            velocity: vec![0.0; dim],
        })
    }

    /// In-place form of [`zo_sgd_step`].
    pub fn step(&mut self, theta: &mut [f64], delta: &[f64]) -> Result<()> {
        if theta.len() != self.velocity.len() {
            return Err(Error::LengthMismatch {
                expected: self.velocity.len(),
                actual: theta.len(),
            });
        }
        if delta.len() != theta.len() {
            return Err(Error::LengthMismatch {
                expected: theta.len(),
                actual: delta.len(),
            });
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("gradient estimate"));
        }
        for ((t, v), g) in theta.iter_mut().zip(self.velocity.iter_mut()).zip(delta) {
            *v = self.momentum * *v + (g + self.weight_decay * *t);
            *t -= self.eta * *v;
        }
        Ok(())
    }
}

pub fn zo_sgd_step(state: &mut OptimState, theta: &Tensor, delta: &GradEstimate) -> Result<Tensor> {
    let mut next = theta.data().to_vec();
    state.step(&mut next, delta.delta.data())?;
    Ok(Tensor::vector(next))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
