use std::io::{stdin, stdout, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use zoadapt::config::ExperimentConfig;
use zoadapt::nn::load_network;
use zoadapt::runner::{self, Command};
use zoadapt::Error;

const DEFAULT_OUT: &str = "zoadapt-out";

#[derive(Parser)]
#[command(name = "zoadapt", version = env!("ZOADAPT_BUILD_ID"), about = "Test-time data adaptation for query-only classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (falls back to $ZOADAPT_OUT, then ./zoadapt-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the reference classifier and save it.
    TrainDeployed(Common),
    /// Adapt on a whole test set at once.
    AdaptOffline(Common),
    /// Adapt on a stream of test batches.
    AdaptOnline(Common),
    /// Run a comparison method (`baseline.method`).
    Baseline(Common),
    /// Compare gradient-estimate error under label noise.
    GradError(Common),
    /// Evaluate the model, optionally behind a saved adaptor.
    Eval(Common),
    /// Run quick internal checks.
    Selftest(Common),
    /// Serve a saved network over stdin/stdout as a remote model.
    ServeModel {
        #[arg(long)]
        model: PathBuf,
    },
}

fn fail(err: &Error) -> ExitCode {
    let kind = if err.is_config() { "config" } else { "runtime" };
    eprintln!(
        "{}",
        json!({ "error": { "kind": kind, "message": err.to_string() } })
    );
    ExitCode::from(if err.is_config() { 2 } else { 1 })
}

fn run(command: Command, common: Common) -> Result<bool, Error> {
    let mut overrides = common.overrides;
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    let out = common
        .out
        .or_else(|| std::env::var_os("ZOADAPT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let (summary, ok) = runner::run(command, &cfg, &out)?;
    if let Some(acc) = summary.get("accuracy").and_then(|a| a.as_object()) {
        for (name, v) in acc {
            println!("{name}: baseline {} final {}", v["baseline"], v["final"]);
        }
    }
    println!(
        "queries {} wall {:.1}s -> {}",
        summary["total_queries"],
        summary["wall_seconds"].as_f64().unwrap_or(0.0),
        out.display()
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::ServeModel { model } => {
            let served = load_network(&model).and_then(|net| {
                zoadapt::blackbox::serve_network(
                    net,
                    stdin().lock(),
                    BufWriter::new(stdout().lock()),
                )
            });
            return match served {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e),
            };
        }
        Cmd::TrainDeployed(c) => (Command::TrainDeployed, c),
        Cmd::AdaptOffline(c) => (Command::AdaptOffline, c),
        Cmd::AdaptOnline(c) => (Command::AdaptOnline, c),
        Cmd::Baseline(c) => (Command::Baseline, c),
        Cmd::GradError(c) => (Command::GradError, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Selftest(c) => (Command::Selftest, c),
    };
    match run(command, common) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => fail(&e),
    }
}
