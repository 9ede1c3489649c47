//! Loss functions over probability rows.
//!
//! Every logarithm of a probability goes through [`safe_ln`], which clamps
//! its argument at the configured floor so one-hot predictions stay finite.
//! Terms with a zero weight contribute exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;
const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Weight of the cross-entropy term on reliable samples.
    pub alpha: f64,
    /// Weight of the L1 perturbation penalty; zero disables it.
    pub beta: f64,
    pub log_floor: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 0.0,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "objective.alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "objective.beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.log_floor > 0.0 && self.log_floor <= 1e-6) {
            return Err(Error::Config(format!(
                "objective.log_floor must lie in (0, 1e-6], got {}",
                self.log_floor
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn safe_ln(p: f64, floor: f64) -> f64 {
    p.max(floor).ln()
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Checks nonnegativity and unit sum (within 1e-9).
pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "entry {v} is negative or non-finite"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// Shannon entropy in nats; `0 log 0 = 0`.
pub fn entropy(p: &[f64], floor: f64) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * safe_ln(v, floor))
        .sum::<f64>()
}

/// `KL(target || pred)`.
pub fn kl_div(target: &[f64], pred: &[f64], floor: f64) -> Result<f64> {
    same_len(target, pred)?;
    Ok(target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &p)| t * (safe_ln(t, floor) - safe_ln(p, floor)))
        .sum())
}

/// Cross-entropy of `pred` against a (possibly soft) label vector.
pub fn cross_entropy(label: &[f64], pred: &[f64], floor: f64) -> Result<f64> {
    same_len(label, pred)?;
    Ok(-label
        .iter()
        .zip(pred)
        .filter(|(y, _)| **y != 0.0)
        .map(|(&y, &p)| y * safe_ln(p, floor))
        .sum::<f64>())
}

/// Cross-entropy against the one-hot label for `class`.
pub fn cross_entropy_class(class: usize, pred: &[f64], floor: f64) -> Result<f64> {
    let p = pred.get(class).ok_or(Error::LengthMismatch {
        expected: class + 1,
        actual: pred.len(),
    })?;
    Ok(-safe_ln(*p, floor))
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// A pseudo-label expressed as a clean one-hot plus a disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyLabel {
    pub clean: Vec<f64>,
    pub disturbance: Vec<f64>,
}

impl NoisyLabel {
    pub fn new(clean: Vec<f64>, disturbance: Vec<f64>) -> Result<Self> {
        same_len(&clean, &disturbance)?;
        let label = Self { clean, disturbance };
        validate_distribution(&label.noisy())?;
        Ok(label)
    }

    /// Builds the label whose noisy form is `noisy` around clean class `class`.
    pub fn from_noisy(class: usize, noisy: &[f64]) -> Result<Self> {
        let clean = one_hot(class, noisy.len());
        let disturbance = noisy.iter().zip(&clean).map(|(n, c)| n - c).collect();
        Self::new(clean, disturbance)
    }

    pub fn noisy(&self) -> Vec<f64> {
        self.clean
            .iter()
            .zip(&self.disturbance)
            .map(|(c, s)| c + s)
            .collect()
    }
}

/// Evaluates both sides of
/// `KL(y + s || p) = -H(y + s) + CE(y, p) - sum_k s_k log p_k`.
pub fn kl_decomposition_check(label: &NoisyLabel, pred: &[f64], floor: f64) -> Result<(f64, f64)> {
    let noisy = label.noisy();
    validate_distribution(&noisy)?;
    validate_distribution(pred)?;
    let lhs = kl_div(&noisy, pred, floor)?;
    let drift: f64 = label
        .disturbance
        .iter()
        .zip(pred)
        .map(|(s, &p)| s * safe_ln(p, floor))
        .sum();
    // Zero-probability noisy entries carry no entropy; their disturbance is
    // exactly the negated clean mass, which the CE and drift terms cancel.
    let rhs = -entropy(&noisy, floor) + cross_entropy(&label.clean, pred, floor)? - drift;
    Ok((lhs, rhs))
}

fn check_rows(rows: &[&[f64]]) -> Result<usize> {
    let c = rows.first().ok_or(Error::Empty("probability batch"))?.len();
    for r in rows {
        if r.len() != c {
            return Err(Error::LengthMismatch {
                expected: c,
                actual: r.len(),
            });
        }
    }
    Ok(c)
}

pub fn mean_row(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let c = check_rows(rows)?;
    // Accumulate offsets from the first row so identical rows average to
    // that row exactly.
    let first = rows[0];
    let mut offset = vec![0.0; c];
    for r in &rows[1..] {
        for ((o, v), f) in offset.iter_mut().zip(r.iter()).zip(first) {
            *o += v - f;
        }
    }
    let n = rows.len() as f64;
    Ok(first.iter().zip(offset).map(|(f, o)| f + o / n).collect())
}

/// `E_i[sum_k p_ik log p_ik] - sum_k pbar_k log pbar_k`, i.e. the entropy of
/// the mean prediction minus the mean per-sample entropy.
pub fn mutual_information(rows: &[&[f64]], floor: f64) -> Result<f64> {
    let mean = mean_row(rows)?;
    let n = rows.len() as f64;
    let h0 = entropy(rows[0], floor);
    let offset: f64 = rows[1..].iter().map(|r| entropy(r, floor) - h0).sum();
    Ok(entropy(&mean, floor) - (h0 + offset / n))
}

/// Convenience over a `(n, C)` probability tensor.
pub fn mutual_information_tensor(probs: &Tensor, floor: f64) -> Result<f64> {
    let rows: Vec<&[f64]> = (0..probs.batch_size()).map(|i| probs.sample(i)).collect();
    mutual_information(&rows, floor)
}

/// Mean over samples of `||adapted - original||_1`.
pub fn l1_perturbation(adapted: &Tensor, original: &Tensor) -> Result<f64> {
    if adapted.shape() != original.shape() {
        return Err(Error::shape(original.shape(), adapted.shape()));
    }
    let total: f64 = adapted
        .data()
        .iter()
        .zip(original.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / adapted.batch_size() as f64)
}

/// `-MI(unreliable) + alpha * mean CE(reliable) + beta * L1`.
///
/// An empty subset contributes zero. `perturbation` is `(adapted, original)`
/// and is required only when `beta > 0`.
pub fn soda_objective(
    reliable: &[&[f64]],
    labels: &[usize],
    unreliable: &[&[f64]],
    cfg: &ObjectiveConfig,
    perturbation: Option<(&Tensor, &Tensor)>,
) -> Result<f64> {
    if reliable.is_empty() && unreliable.is_empty() {
        return Err(Error::Empty("both reliable and unreliable subsets"));
    }
    if reliable.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: reliable.len(),
            actual: labels.len(),
        });
    }
    let mut total = 0.0;
    if !unreliable.is_empty() {
        total -= mutual_information(unreliable, cfg.log_floor)?;
    }
    if !reliable.is_empty() {
        let mut ce = 0.0;
        for (p, &y) in reliable.iter().zip(labels) {
            ce += cross_entropy_class(y, p, cfg.log_floor)?;
        }
        total += cfg.alpha * ce / reliable.len() as f64;
    }
    if cfg.beta > 0.0 {
        let (adapted, original) = perturbation.ok_or_else(|| {
            Error::InvalidArgument("beta > 0 requires the adapted and original batches".into())
        })?;
        total += cfg.beta * l1_perturbation(adapted, original)?;
    }
    Ok(total)
}

// Derivatives with respect to the probability entries. They ignore the log
// floor, so they are exact only for strictly positive inputs above it.

/// `d KL(target || p) / d p`.
pub fn kl_div_grad(target: &[f64], pred: &[f64]) -> Vec<f64> {
    target
        .iter()
        .zip(pred)
        .map(|(t, p)| if *t > 0.0 { -t / p } else { 0.0 })
        .collect()
}

/// `d CE(class, p) / d p`.
pub fn cross_entropy_class_grad(class: usize, pred: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; pred.len()];
    g[class] = -1.0 / pred[class];
    g
}

/// `d MI / d p_ik = (log p_ik - log pbar_k) / n`, one row per sample.
pub fn mutual_information_grad(rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let mean = mean_row(rows)?;
    let n = rows.len() as f64;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .map(|(p, m)| (p.ln() - m.ln()) / n)
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const F: f64 = DEFAULT_LOG_FLOOR;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_div(&p, &p, F).unwrap(), 0.0);
        let u = [0.1; 10];
        assert!(close(
            kl_div(&one_hot(4, 10), &u, F).unwrap(),
            10f64.ln(),
            1e-12
        ));
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!(close(
            kl_div(&[0.5, 0.5], &[0.9, 0.1], F).unwrap(),
            expect,
            1e-12
        ));
        assert!(close(expect, 0.510826, 1e-6));
        assert!(kl_div(&[1.0], &[0.5, 0.5], F).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0], F).unwrap(), 0.0);
        assert!(close(
            cross_entropy(&one_hot(0, 10), &[0.1; 10], F).unwrap(),
            10f64.ln(),
            1e-12
        ));
        let ce = cross_entropy_class(2, &[0.2, 0.3, 0.5], F).unwrap();
        assert!(close(ce, 0.693147, 1e-6));
        assert_eq!(
            ce,
            cross_entropy(&one_hot(2, 3), &[0.2, 0.3, 0.5], F).unwrap()
        );
        assert!(cross_entropy_class(3, &[0.5, 0.5], F).is_err());
        // Clamped: a zero prediction on the true class stays finite.
        assert!(close(
            cross_entropy_class(0, &[0.0, 1.0], F).unwrap(),
            -(F.ln()),
            1e-9
        ));
    }

    #[test]
    fn decomposition_examples() {
        let pred = [0.1, 0.6, 0.3];
        let clean = NoisyLabel::new(one_hot(1, 3), vec![0.0; 3]).unwrap();
        let (lhs, rhs) = kl_decomposition_check(&clean, &pred, F).unwrap();
        let ce = cross_entropy_class(1, &pred, F).unwrap();
        assert!(close(lhs, ce, 1e-12) && close(rhs, ce, 1e-12));

        let u = [0.25; 4];
        let noisy = NoisyLabel::from_noisy(2, &u).unwrap();
        let (lhs, rhs) = kl_decomposition_check(&noisy, &u, F).unwrap();
        assert!(lhs.abs() < 1e-12 && rhs.abs() < 1e-12);

        // Noisy label with exact zeros.
        let lbl = NoisyLabel::from_noisy(0, &[0.0, 0.7, 0.3]).unwrap();
        let (lhs, rhs) = kl_decomposition_check(&lbl, &pred, F).unwrap();
        assert!(close(lhs, rhs, 1e-12));
    }

    #[test]
    fn invalid_noisy_label_rejected() {
        assert!(NoisyLabel::new(one_hot(0, 2), vec![0.5, 0.0]).is_err());
        assert!(NoisyLabel::new(one_hot(0, 2), vec![-1.5, 1.5]).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        let p = [0.3, 0.2, 0.5];
        assert_eq!(mutual_information(&[&p, &p, &p], F).unwrap(), 0.0);
        let rows: Vec<Vec<f64>> = (0..10).map(|k| one_hot(k, 10)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mi = mutual_information(&refs, F).unwrap();
        assert!(close(mi, 10f64.ln(), 10.0 * F));
        let mi2 = mutual_information(&[&[1.0, 0.0], &[0.0, 1.0]], F).unwrap();
        assert!(close(mi2, 2f64.ln(), 1e-12));
        assert!(matches!(mutual_information(&[], F), Err(Error::Empty(_))));
    }

    #[test]
    fn l1_examples() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert_eq!(l1_perturbation(&x, &x).unwrap(), 0.0);
        let up = Tensor::filled(&[1, 2, 2, 2], 0.5);
        let down = Tensor::filled(&[1, 2, 2, 2], -0.5);
        assert_eq!(l1_perturbation(&up, &x).unwrap(), 4.0);
        assert_eq!(l1_perturbation(&down, &x).unwrap(), 4.0);
        assert!(l1_perturbation(&Tensor::zeros(&[2, 2]), &x).is_err());
    }

    #[test]
    fn soda_objective_examples() {
        let cfg = ObjectiveConfig::default();
        let p = [0.25, 0.75];
        assert_eq!(
            soda_objective(&[], &[], &[&p, &p], &cfg, None).unwrap(),
            0.0
        );
        assert_eq!(
            soda_objective(&[&[0.0, 1.0]], &[1], &[], &cfg, None).unwrap(),
            0.0
        );

        let rows: Vec<Vec<f64>> = (0..10).map(|k| one_hot(k, 10)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let uniform = [0.1; 10];
        let v = soda_objective(&[&uniform], &[3], &refs, &cfg, None).unwrap();
        let l10 = 10f64.ln();
        assert!(close(v, -l10 + 1e-4 * l10, 1e-9));

        assert!(soda_objective(&[], &[], &[], &cfg, None).is_err());
        let with_beta = ObjectiveConfig { beta: 0.5, ..cfg };
        assert!(soda_objective(&[&p], &[0], &[], &with_beta, None).is_err());
        let a = Tensor::filled(&[1, 4], 0.25);
        let o = Tensor::zeros(&[1, 4]);
        let v = soda_objective(&[&[0.0, 1.0]], &[1], &[], &with_beta, Some((&a, &o))).unwrap();
        assert!(close(v, 0.5, 1e-15));
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        assert!(ObjectiveConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ObjectiveConfig {
            log_floor: 1e-3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn probability_gradients_match_differences() {
        let t = [0.2, 0.5, 0.3];
        let p = [0.4, 0.35, 0.25];
        let g = kl_div_grad(&t, &p);
        let gc = cross_entropy_class_grad(1, &p);
        for i in 0..3 {
            assert!(close(
                g[i],
                central(|x| kl_div(&t, x, F).unwrap(), &p, i),
                1e-6
            ));
            assert!(close(
                gc[i],
                central(|x| cross_entropy_class(1, x, F).unwrap(), &p, i),
                1e-6
            ));
        }
        let rows = [[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let gm = mutual_information_grad(&refs).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mi = |x: &[f64]| {
            let r: Vec<&[f64]> = x.chunks(2).collect();
            mutual_information(&r, F).unwrap()
        };
        for i in 0..6 {
            assert!(close(gm[i / 2][i % 2], central(mi, &flat, i), 1e-6));
        }
    }
}
