//! Quick invariant checks runnable from the command line.

use rand::Rng;
use serde_json::{json, Map, Value};

use crate::adaptor::{AdaptorConfig, DataAdaptor};
use crate::bench::{generate_dataset, train_network, ArchSpec, TrainConfig};
use crate::blackbox::{BlackBoxModel, PseudoLabelRecord};
use crate::engine::{offline_epoch_queries, soda_offline, RunConfig};
use crate::error::Result;
use crate::objectives::{entropy, mutual_information};
use crate::rng::{stream, Purpose};
use crate::runner::Report;
use crate::select::{select_reliable, ReliableQueue, SelectionConfig};
use crate::tensor::Tensor;
use crate::zoo::{multi_point_estimate, ZooConfig};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn random_rows(n: usize, c: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Purpose::Trial, &[]);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn mi_bounds() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let rows = random_rows(16, 5, seed);
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mi = mutual_information(&refs, 1e-12)?;
        let upper = (5f64).ln();
        worst = worst.max((-mi).max(mi - upper));
    }
    Ok(check(
        "mutual information within [0, ln C]",
        worst <= 1e-9,
        format!("worst violation {worst:.3e}"),
    ))
}

fn entropy_max() -> Result<Check> {
    let u = vec![0.25; 4];
    let h = entropy(&u, 1e-12);
    Ok(check(
        "uniform entropy is ln C",
        (h - 4f64.ln()).abs() < 1e-12,
        format!("{h}"),
    ))
}

fn zoo_linear() -> Result<Check> {
    // For a linear function the averaged estimate should approach the slope.
    let g: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let f = |t: &[f64]| -> Result<f64> { Ok(t.iter().zip(&g).map(|(a, b)| a * b).sum()) };
    let cfg = ZooConfig {
        q: 4000,
        mu: 1e-3,
        seed: 11,
        antithetic: false,
    };
    let est = multi_point_estimate(f, &Tensor::vector(vec![0.0; 8]), &cfg, &[0])?;
    let err: f64 = est
        .delta
        .data()
        .iter()
        .zip(&g)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(check(
        "zeroth-order estimate tracks a linear gradient",
        err / norm < 0.15,
        format!("relative error {:.4}", err / norm),
    ))
}

fn selection_caps() -> Result<Check> {
    let mut rng = stream(5, Purpose::Trial, &[]);
    let records: Vec<PseudoLabelRecord> = (0..1000)
        .map(|i| PseudoLabelRecord {
            sample_index: i,
            class_id: rng.random_range(0..10),
            confidence: rng.random(),
        })
        .collect();
    let cfg = SelectionConfig { tau: 0.5, rho: 0.9 };
    let sel = select_reliable(&records, &cfg, 10)?;
    let cap = cfg.per_class_cap(1000, 10);
    let mut counts = [0usize; 10];
    for &i in &sel.reliable {
        counts[records[i].class_id] += 1;
    }
    let ok = counts.iter().all(|&c| c <= cap)
        && sel
            .reliable
            .iter()
            .all(|&i| records[i].confidence > cfg.tau)
        && sel.reliable.len() + sel.unreliable.len() == records.len();
    Ok(check(
        "selection respects threshold and per-class cap",
        ok,
        format!("cap {cap}, counts {counts:?}"),
    ))
}

fn queue_invariants() -> Result<Check> {
    let mut q: ReliableQueue<()> = ReliableQueue::new(100, 10)?;
    let mut rng = stream(6, Purpose::Trial, &[]);
    for i in 0..1000 {
        q.push(
            PseudoLabelRecord {
                sample_index: i,
                class_id: rng.random_range(0..10),
                confidence: rng.random(),
            },
            (),
        )?;
        q.check_invariants()?;
    }
    Ok(check(
        "queue stays within per-class capacity",
        q.len() <= 100,
        format!("{} stored", q.len()),
    ))
}

fn query_accounting() -> Result<Check> {
    let ds = generate_dataset(48, 3, 1)?.downsample(4)?;
    let arch = ArchSpec {
        conv1_channels: 2,
        conv2_channels: 4,
    };
    let train = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let (net, _) = train_network(&ds, &arch, &train, 2)?;
    let model = BlackBoxModel::from_network(net)?;
    let adaptor = DataAdaptor::new(
        ds.sample_shape(),
        &AdaptorConfig {
            hidden_channels: 1,
            ..Default::default()
        },
    )?;
    let mut cfg = RunConfig {
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    };
    cfg.zoo.q = 3;
    let before = model.query_count();
    // No labels, so no accuracy monitoring queries.
    let run = soda_offline(
        &model,
        &adaptor,
        &ds.images,
        None,
        &cfg,
        adaptor.init_params(cfg.seed),
    )?;
    let used = model.query_count() - before;
    let per_epoch = offline_epoch_queries(ds.len(), cfg.zoo.q);
    let rows: u64 = run.metrics.iter().map(|m| m.queries).sum();
    let expected = ds.len() as u64 + 2 * per_epoch;
    Ok(check(
        "query counter matches the accounting formula",
        used == expected && rows == 2 * per_epoch,
        format!("counted {used}, expected {expected}"),
    ))
}

pub fn run_checks() -> Result<Vec<Check>> {
    Ok(vec![
        mi_bounds()?,
        entropy_max()?,
        zoo_linear()?,
        selection_caps()?,
        queue_invariants()?,
        query_accounting()?,
    ])
}

/// Runs the checks, printing one line each, and packs them into a report.
pub fn run_report() -> Result<Report> {
    let checks = run_checks()?;
    let mut report = Report::default();
    report.ok = checks.iter().all(|c| c.passed);
    let mut list = Vec::new();
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        let mut m = Map::new();
        m.insert("name".into(), json!(c.name));
        m.insert("passed".into(), json!(c.passed));
        m.insert("detail".into(), json!(c.detail));
        list.push(Value::Object(m));
    }
    report.extra.insert("checks".into(), Value::Array(list));
    Ok(report)
}
