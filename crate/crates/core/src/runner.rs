//! Command pipelines behind the `zoadapt` binary.
//!
//! Each command writes `metrics.csv`, `summary.json` and `config.toml` into
//! its output directory, plus command-specific weight or data files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::adaptor::{AdaptorConfig, AdaptorMode, AdaptorParams, DataAdaptor};
use crate::bench::{
    corrupt, evaluate, evaluate_raw, generate_dataset, load_dataset, save_dataset, train_network,
    Corruption, ShapeDataset, TrainReport,
};
use crate::blackbox::{BlackBoxModel, RemoteClassifier};
use crate::config::{BaselineMethod, ExperimentConfig};
use crate::engine::{
    baseline_da_direct, baseline_da_pgd, baseline_da_pl, baseline_da_zoo_input,
    grad_error_experiment, soda_offline, soda_online, split_batches, write_metrics_csv,
    EpochMetrics, RunOutput,
};
use crate::error::{Error, Result};
use crate::nn::{load_network, save_network, Network};
use crate::rng::{derive_seed, Purpose};
use crate::select::write_selection_csv;
use crate::tensor::Tensor;

pub const BUILD_ID: &str = env!("ZOADAPT_BUILD_ID");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainDeployed,
    AdaptOffline,
    AdaptOnline,
    Baseline,
    GradError,
    Eval,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainDeployed => "train-deployed",
            Command::AdaptOffline => "adapt-offline",
            Command::AdaptOnline => "adapt-online",
            Command::Baseline => "baseline",
            Command::GradError => "grad-error",
            Command::Eval => "eval",
            Command::Selftest => "selftest",
        }
    }
}

/// What a command produced, before it is written out.
#[derive(Debug, Default)]
pub struct Report {
    pub metrics: Vec<(String, Vec<EpochMetrics>)>,
    /// Per-dataset accuracy entries for the summary table.
    pub accuracy: Map<String, Value>,
    /// Command-specific summary fields.
    pub extra: Map<String, Value>,
    /// False when a self-check failed.
    pub ok: bool,
}

impl Report {
    fn new() -> Self {
        Self {
            ok: true,
            ..Default::default()
        }
    }
}

/// The deployed model and the evaluation data of one experiment.
pub struct Bench {
    pub model: BlackBoxModel,
    /// The network behind `model` when it was trained or loaded locally.
    pub network: Option<Network>,
    pub train_report: Option<TrainReport>,
    pub clean: Option<ShapeDataset>,
    /// `(name, dataset)` for each shifted test set.
    pub shifted: Vec<(String, ShapeDataset)>,
}

/// Seeds for the benchmark pieces, all derived from the root seed.
pub mod seeds {
    use super::*;

    pub fn train_data(root: u64) -> u64 {
        derive_seed(root, Purpose::Dataset, &[0])
    }
    pub fn test_data(root: u64) -> u64 {
        derive_seed(root, Purpose::Dataset, &[1])
    }
    pub fn model(root: u64) -> u64 {
        derive_seed(root, Purpose::Training, &[0])
    }
    pub fn corruption(root: u64) -> u64 {
        derive_seed(root, Purpose::Corruption, &[0])
    }
}

fn train_set(cfg: &ExperimentConfig) -> Result<ShapeDataset> {
    generate_dataset(
        cfg.data.train_size,
        cfg.data.classes,
        seeds::train_data(cfg.seed),
    )
}

/// Loads, spawns or trains the deployed model and builds the test sets.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Bench> {
    let (model, network, train_report) = if let Some(cmd) = &cfg.model.remote {
        (
            BlackBoxModel::new(RemoteClassifier::spawn(&cmd[0], &cmd[1..])?),
            None,
            None,
        )
    } else if let Some(path) = &cfg.model.path {
        let net = load_network(path)?;
        (BlackBoxModel::from_network(net.clone())?, Some(net), None)
    } else {
        let (net, report) = train_network(
            &train_set(cfg)?,
            &cfg.model.arch,
            &cfg.model.train,
            seeds::model(cfg.seed),
        )?;
        (
            BlackBoxModel::from_network(net.clone())?,
            Some(net),
            Some(report),
        )
    };
    let (clean, shifted) = match &cfg.data.test_path {
        Some(path) => (None, vec![("external".to_string(), load_dataset(path)?)]),
        None => {
            let clean = generate_dataset(
                cfg.data.test_size,
                cfg.data.classes,
                seeds::test_data(cfg.seed),
            )?;
            let shifted = cfg
                .data
                .corruptions
                .iter()
                .map(|&kind| {
                    let c = Corruption::new(kind, cfg.data.severity)?;
                    Ok((
                        kind.name().to_string(),
                        corrupt(&clean, c, seeds::corruption(cfg.seed))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(clean), shifted)
        }
    };
    for ds in clean.iter().chain(shifted.iter().map(|(_, d)| d)) {
        if ds.sample_shape() != model.input_shape() {
            return Err(Error::shape(model.input_shape(), ds.sample_shape()));
        }
        if ds.num_classes != model.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "data has {} classes, model has {}",
                ds.num_classes,
                model.num_classes()
            )));
        }
    }
    Ok(Bench {
        model,
        network,
        train_report,
        clean,
        shifted,
    })
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn save_adaptor(adaptor: &DataAdaptor, theta: &AdaptorParams, path: &Path) -> Result<()> {
    let mut net = adaptor.network().clone();
    net.set_params(theta.data())?;
    save_network(&net, path)
}

/// Row 0 of every adaptation run: the unadapted accuracy and the
/// pseudo-labelling queries.
fn baseline_row(accuracy: Option<f64>, queries: u64) -> EpochMetrics {
    EpochMetrics {
        epoch: 0,
        objective: None,
        accuracy,
        queries,
        seconds: 0.0,
    }
}

fn accuracy_entry(baseline: Option<f64>, fin: Option<f64>) -> Value {
    json!({ "baseline": baseline, "final": fin })
}

fn file_name(prefix: &str, name: &str, ext: &str) -> String {
    format!("{prefix}_{name}.{ext}")
}

fn offline_like(
    bench: &Bench,
    cfg: &ExperimentConfig,
    out: &Path,
    adaptor_cfg: &AdaptorConfig,
    f: impl Fn(&BlackBoxModel, &DataAdaptor, &ShapeDataset, AdaptorParams) -> Result<RunOutput>,
) -> Result<Report> {
    let mut report = Report::new();
    for (name, ds) in &bench.shifted {
        let adaptor = DataAdaptor::new(ds.sample_shape(), adaptor_cfg)?;
        let init = adaptor.init_params(cfg.seed);
        let run = f(&bench.model, &adaptor, ds, init)?;
        let mut rows = vec![baseline_row(run.baseline_accuracy, ds.len() as u64)];
        rows.extend(run.metrics.iter().cloned());
        save_adaptor(
            &adaptor,
            &run.theta,
            &out.join(file_name("adaptor", name, "bbtn")),
        )?;
        let sel = File::create(out.join(file_name("selection", name, "csv")))?;
        write_selection_csv(&run.records, &run.selection, BufWriter::new(sel))?;
        report.accuracy.insert(
            name.clone(),
            accuracy_entry(run.baseline_accuracy, run.final_accuracy()),
        );
        report.metrics.push((name.clone(), rows));
    }
    Ok(report)
}

fn cmd_train_deployed(bench: &Bench, out: &Path) -> Result<Report> {
    let (net, tr) = match (&bench.network, &bench.train_report) {
        (Some(n), Some(r)) => (n, r),
        _ => {
            return Err(Error::Config(
                "train-deployed needs model.path and model.remote unset".into(),
            ))
        }
    };
    save_network(net, &out.join("model.bbtn"))?;
    let mut report = Report::new();
    let rows = tr
        .losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| EpochMetrics {
            epoch: i + 1,
            objective: Some(loss),
            accuracy: None,
            queries: 0,
            seconds: 0.0,
        })
        .collect();
    report.metrics.push(("train".into(), rows));
    report
        .extra
        .insert("train_accuracy".into(), json!(tr.train_accuracy));
    raw_accuracy_table(bench, &mut report)?;
    Ok(report)
}

fn raw_accuracy_table(bench: &Bench, report: &mut Report) -> Result<()> {
    if let Some(clean) = &bench.clean {
        let acc = evaluate_raw(&bench.model, clean)?;
        report
            .accuracy
            .insert("clean".into(), accuracy_entry(Some(acc), Some(acc)));
    }
    for (name, ds) in &bench.shifted {
        let acc = evaluate_raw(&bench.model, ds)?;
        report
            .accuracy
            .insert(name.clone(), accuracy_entry(Some(acc), Some(acc)));
    }
    Ok(())
}

fn cmd_online(bench: &Bench, cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let run_cfg = cfg.run_config();
    let mut report = Report::new();
    for (name, ds) in &bench.shifted {
        let adaptor = DataAdaptor::new(ds.sample_shape(), &cfg.adaptor)?;
        let init = adaptor.init_params(cfg.seed);
        let batches = split_batches(&ds.images, run_cfg.batch_size)?;
        let labels: Vec<Vec<usize>> = ds
            .labels
            .chunks(run_cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        let baseline = evaluate_raw(&bench.model, ds)?;
        let run = soda_online(
            &bench.model,
            &adaptor,
            &batches,
            Some(&labels),
            &run_cfg,
            init,
        )?;
        // Per-batch rows already include the pseudo-labelling queries.
        let mut rows = vec![baseline_row(Some(baseline), 0)];
        rows.extend(run.metrics.iter().cloned());
        save_adaptor(
            &adaptor,
            &run.theta,
            &out.join(file_name("adaptor", name, "bbtn")),
        )?;
        report
            .accuracy
            .insert(name.clone(), accuracy_entry(Some(baseline), run.accuracy));
        report.metrics.push((name.clone(), rows));
    }
    Ok(report)
}

fn cmd_baseline(bench: &Bench, cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let run_cfg = cfg.run_config();
    let method = cfg.baseline.method;
    let mut report = match method {
        BaselineMethod::DaPl => offline_like(bench, cfg, out, &cfg.adaptor, |m, a, ds, init| {
            baseline_da_pl(m, a, &ds.images, Some(&ds.labels), &run_cfg, init)
        })?,
        BaselineMethod::DaDirect => {
            let direct = AdaptorConfig {
                mode: AdaptorMode::Direct,
                ..cfg.adaptor.clone()
            };
            offline_like(bench, cfg, out, &direct, |m, a, ds, init| {
                baseline_da_direct(m, a, &ds.images, Some(&ds.labels), &run_cfg, init)
            })?
        }
        BaselineMethod::DaZooInput => {
            offline_like(bench, cfg, out, &cfg.adaptor, |m, a, ds, init| {
                baseline_da_zoo_input(m, a, &ds.images, Some(&ds.labels), &run_cfg, init)
            })?
        }
        BaselineMethod::DaPgd => {
            let mut report = Report::new();
            for (name, ds) in &bench.shifted {
                let run = baseline_da_pgd(&bench.model, &ds.images, Some(&ds.labels), &run_cfg)?;
                let mut rows = vec![baseline_row(run.baseline_accuracy, ds.len() as u64)];
                rows.extend(run.metrics.iter().cloned());
                let adapted =
                    ShapeDataset::new(run.adapted.clone(), ds.labels.clone(), ds.num_classes)?;
                save_dataset(&adapted, &out.join(file_name("adapted", name, "bbtd")))?;
                report.accuracy.insert(
                    name.clone(),
                    accuracy_entry(run.baseline_accuracy, run.final_accuracy()),
                );
                report.metrics.push((name.clone(), rows));
            }
            report
        }
    };
    report.extra.insert("method".into(), json!(method.name()));
    Ok(report)
}

/// The downsampled model, adaptor and samples used where exact gradients
/// have to be computed by finite differences.
pub fn small_bench(cfg: &ExperimentConfig) -> Result<(BlackBoxModel, DataAdaptor, ShapeDataset)> {
    let g = &cfg.grad_error;
    let train = train_set(cfg)?.downsample(g.downsample)?;
    let (net, _) = train_network(&train, &g.arch, &cfg.model.train, seeds::model(cfg.seed))?;
    let model = BlackBoxModel::from_network(net)?;
    let data = generate_dataset(g.samples, cfg.data.classes, seeds::test_data(cfg.seed))?
        .downsample(g.downsample)?;
    let adaptor = DataAdaptor::new(
        data.sample_shape(),
        &AdaptorConfig {
            hidden_channels: g.adaptor_hidden,
            ..cfg.adaptor.clone()
        },
    )?;
    Ok((model, adaptor, data))
}

fn cmd_grad_error(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let (model, adaptor, data) = small_bench(cfg)?;
    let result = grad_error_experiment(
        &model,
        &adaptor,
        &data.images,
        &data.labels,
        &cfg.grad_error.spec(),
        &cfg.run_config(),
    )?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join("grad_error.csv"))?));
    for t in &result.trials {
        w.serialize(t).map_err(crate::select::csv_err)?;
    }
    w.flush()?;
    let mut report = Report::new();
    report
        .extra
        .insert("adaptor_params".into(), json!(adaptor.param_count()));
    report.extra.insert("naive".into(), to_json(&result.naive));
    report
        .extra
        .insert("robust".into(), to_json(&result.robust));
    report
        .extra
        .insert("difference".into(), to_json(&result.difference));
    Ok(report)
}

fn cmd_eval(bench: &Bench, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new();
    let Some(path) = &cfg.eval.adaptor_path else {
        raw_accuracy_table(bench, &mut report)?;
        if !cfg.eval.clean {
            report.accuracy.remove("clean");
        }
        return Ok(report);
    };
    let net = load_network(path)?;
    let shape = bench.model.input_shape();
    let adaptor = DataAdaptor::new(shape, &cfg.adaptor)?;
    if net.param_count() != adaptor.param_count() || net.input_shape() != shape {
        return Err(Error::Config(format!(
            "{} does not match the configured adaptor ({} parameters)",
            path.display(),
            adaptor.param_count()
        )));
    }
    let theta = Tensor::vector(net.params_vec());
    let mut sets: Vec<(&str, &ShapeDataset)> = Vec::new();
    if let (Some(clean), true) = (&bench.clean, cfg.eval.clean) {
        sets.push(("clean", clean));
    }
    sets.extend(bench.shifted.iter().map(|(n, d)| (n.as_str(), d)));
    for (name, ds) in sets {
        let raw = evaluate_raw(&bench.model, ds)?;
        let adapted = evaluate(&bench.model, &adaptor, &theta, ds)?;
        report
            .accuracy
            .insert(name.into(), accuracy_entry(Some(raw), Some(adapted)));
    }
    Ok(report)
}

/// Runs `command` with `cfg`, writing its artifacts into `out`, and returns
/// the summary that was written.
pub fn run(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<(Value, bool)> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let (report, queries) = pool.install(|| -> Result<(Report, u64)> {
        match command {
            Command::GradError => Ok((cmd_grad_error(cfg, out)?, 0)),
            Command::Selftest => Ok((crate::selftest::run_report()?, 0)),
            _ => {
                let bench = prepare(cfg)?;
                let before = bench.model.query_count();
                let report = match command {
                    Command::TrainDeployed => cmd_train_deployed(&bench, out)?,
                    Command::AdaptOffline => {
                        offline_like(&bench, cfg, out, &cfg.adaptor, |m, a, ds, init| {
                            soda_offline(
                                m,
                                a,
                                &ds.images,
                                Some(&ds.labels),
                                &cfg.run_config(),
                                init,
                            )
                        })?
                    }
                    Command::AdaptOnline => cmd_online(&bench, cfg, out)?,
                    Command::Baseline => cmd_baseline(&bench, cfg, out)?,
                    Command::Eval => cmd_eval(&bench, cfg)?,
                    Command::GradError | Command::Selftest => unreachable!(),
                };
                Ok((report, bench.model.query_count() - before))
            }
        }
    })?;
    let wall = started.elapsed().as_secs_f64();

    let runs: Vec<(&str, &[EpochMetrics])> = report
        .metrics
        .iter()
        .map(|(n, r)| (n.as_str(), r.as_slice()))
        .collect();
    write_metrics_csv(
        &runs,
        cfg.timing,
        BufWriter::new(File::create(out.join("metrics.csv"))?),
    )?;
    // Rows follow the closed-form accounting; accuracy monitoring is extra.
    let total_queries: u64 = report
        .metrics
        .iter()
        .flat_map(|(_, r)| r)
        .map(|m| m.queries)
        .sum();
    let monitor_queries = queries.saturating_sub(total_queries);
    let mut summary = Map::new();
    summary.insert("command".into(), json!(command.name()));
    summary.insert("build_id".into(), json!(BUILD_ID));
    summary.insert("config".into(), to_json(cfg));
    summary.insert("total_queries".into(), json!(total_queries));
    summary.insert("monitor_queries".into(), json!(monitor_queries));
    summary.insert("wall_seconds".into(), json!(wall));
    summary.insert("accuracy".into(), Value::Object(report.accuracy));
    summary.insert("ok".into(), json!(report.ok));
    summary.extend(report.extra);
    let summary = Value::Object(summary);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.join("summary.json"), text + "\n")?;
    Ok((summary, report.ok))
}
