//! `gsli` — one entry point for training, imputing, evaluating, and
//! inspecting the multi-scale graph-structure-learning imputation model.
//!
//! Settings come from an optional `key = value` config file plus flags;
//! every flag mirrors exactly one config key (named in its help text) and
//! flags win. Artifacts land under the output directory only. Exit codes:
//! 0 success, 1 runtime failure, 2 configuration failure; failures print
//! a single JSON line on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "gsli",
    about = "Multi-scale graph-structure-learning imputation for sensor panels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flag counterparts of the config keys. Each subcommand reads the subset
/// it needs; setting an unused flag is harmless.
#[derive(Args, Default)]
struct Overrides {
    /// Key-value config file; flags override its keys
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset: `dutchwind`, `synth`, a measurements CSV, or a directory
    /// holding measurements.csv + stations.csv (dataset.name/dataset.path)
    #[arg(long, value_name = "NAME|PATH")]
    dataset: Option<String>,
    /// Station coordinates CSV (adjacency.coords)
    #[arg(long, value_name = "FILE")]
    coords: Option<PathBuf>,
    /// Dense adjacency CSV (adjacency.path)
    #[arg(long, value_name = "FILE")]
    adjacency: Option<PathBuf>,
    /// Gaussian kernel cutoff (gaussian.threshold)
    #[arg(long, value_name = "X")]
    threshold: Option<f64>,
    /// Distance metric: haversine or euclidean (gaussian.metric)
    #[arg(long, value_name = "METRIC")]
    metric: Option<String>,
    /// Window length in steps (window.length)
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// Training window stride (window.stride)
    #[arg(long, value_name = "N")]
    stride: Option<usize>,
    /// Hidden channels per feature (model.c)
    #[arg(long, value_name = "N")]
    c: Option<usize>,
    /// Graph embedding width (model.d)
    #[arg(long, value_name = "N")]
    d: Option<usize>,
    /// Diffusion steps per convolution (model.k)
    #[arg(long, value_name = "N")]
    k: Option<usize>,
    /// Model layers (model.l)
    #[arg(long, value_name = "N")]
    l: Option<usize>,
    /// Architecture variant key (model.variant)
    #[arg(long, value_name = "KEY")]
    variant: Option<String>,
    /// Training epochs (train.epochs)
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Learning rate (train.lr)
    #[arg(long, value_name = "X")]
    lr: Option<f64>,
    /// Gradient-norm clip (train.clip)
    #[arg(long, value_name = "X")]
    clip: Option<f64>,
    /// Training label fraction (train.mask_ratio)
    #[arg(long, value_name = "X")]
    mask_ratio: Option<f64>,
    /// Label pattern: random, historical, block:<len> (train.pattern)
    #[arg(long, value_name = "PATTERN")]
    pattern: Option<String>,
    /// Base seed for training and synthesis (train.seed)
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Missingness mechanisms, comma-separated: mcar, mar[:<feature>],
    /// mnar[:<q>:<hi>:<lo>] (eval.mechanisms)
    #[arg(long, value_name = "LIST")]
    mechanism: Option<String>,
    /// Missing rates, comma-separated (eval.rates)
    #[arg(long, value_name = "LIST")]
    rate: Option<String>,
    /// Evaluation seeds: `a..b` inclusive or a comma list (eval.seeds)
    #[arg(long, value_name = "RANGE")]
    seeds: Option<String>,
    /// Synthetic station count (synth.n)
    #[arg(long, value_name = "N")]
    n: Option<usize>,
    /// Synthetic feature count (synth.f)
    #[arg(long, value_name = "N")]
    f: Option<usize>,
    /// Synthetic series length (synth.t)
    #[arg(long, value_name = "N")]
    t: Option<usize>,
    /// Synthetic innovation scale (synth.noise)
    #[arg(long, value_name = "X")]
    noise: Option<f64>,
    /// Checkpoint to load (checkpoint.path)
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Output directory; all artifacts stay inside it (out.dir)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the configured dataset and save a checkpoint
    Train(Overrides),
    /// Impute a dataset with a trained checkpoint
    Impute(Overrides),
    /// Run the mechanism x rate x seed evaluation grid
    Evaluate(Overrides),
    /// Evaluate a named architecture variant from the ablation registry
    Ablate(Overrides),
    /// Generate the heterogeneous ring synthetic dataset
    Synth(Overrides),
    /// Export the learned graphs from a checkpoint as adjacency CSVs
    ExportGraphs(Overrides),
    /// Numerically verify the framework's structural claims
    CheckPropositions(Overrides),
}

impl Command {
    fn parts(&self) -> (&Overrides, fn(&RunConfig) -> Result<(), CliError>) {
        match self {
            Command::Train(o) => (o, commands::cmd_train),
            Command::Impute(o) => (o, commands::cmd_impute),
            Command::Evaluate(o) => (o, commands::cmd_evaluate),
            Command::Ablate(o) => (o, commands::cmd_ablate),
            Command::Synth(o) => (o, commands::cmd_synth),
            Command::ExportGraphs(o) => (o, commands::cmd_export_graphs),
            Command::CheckPropositions(o) => (o, commands::cmd_check_propositions),
        }
    }
}

/// Turns the flag set into `(key, value)` overrides.
///
/// `--dataset` is the one smart flag: builtin names select `dataset.name`,
/// a CSV file becomes `dataset.path`, and a directory supplies both the
/// measurements file and the station coordinates next to it.
fn collect_overrides(o: &Overrides) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut push = |key: &str, value: Option<String>| {
        if let Some(value) = value {
            pairs.push((key.to_string(), value));
        }
    };
    match o.dataset.as_deref() {
        Some(name @ ("dutchwind" | "synth")) => push("dataset.name", Some(name.into())),
        Some(path) => {
            let p = PathBuf::from(path);
            if p.is_dir() {
                push(
                    "dataset.path",
                    Some(p.join("measurements.csv").display().to_string()),
                );
                if o.coords.is_none() && o.adjacency.is_none() {
                    push(
                        "adjacency.coords",
                        Some(p.join("stations.csv").display().to_string()),
                    );
                }
            } else {
                push("dataset.path", Some(path.into()));
            }
        }
        None => {}
    }
    push("adjacency.coords", o.coords.as_ref().map(|p| p.display().to_string()));
    push("adjacency.path", o.adjacency.as_ref().map(|p| p.display().to_string()));
    push("gaussian.threshold", o.threshold.map(|v| v.to_string()));
    push("gaussian.metric", o.metric.clone());
    push("window.length", o.window.map(|v| v.to_string()));
    push("window.stride", o.stride.map(|v| v.to_string()));
    push("model.c", o.c.map(|v| v.to_string()));
    push("model.d", o.d.map(|v| v.to_string()));
    push("model.k", o.k.map(|v| v.to_string()));
    push("model.l", o.l.map(|v| v.to_string()));
    push("model.variant", o.variant.clone());
    push("train.epochs", o.epochs.map(|v| v.to_string()));
    push("train.lr", o.lr.map(|v| v.to_string()));
    push("train.clip", o.clip.map(|v| v.to_string()));
    push("train.mask_ratio", o.mask_ratio.map(|v| v.to_string()));
    push("train.pattern", o.pattern.clone());
    push("train.seed", o.seed.map(|v| v.to_string()));
    push("eval.mechanisms", o.mechanism.clone());
    push("eval.rates", o.rate.clone());
    push("eval.seeds", o.seeds.clone());
    push("synth.n", o.n.map(|v| v.to_string()));
    push("synth.f", o.f.map(|v| v.to_string()));
    push("synth.t", o.t.map(|v| v.to_string()));
    push("synth.noise", o.noise.map(|v| v.to_string()));
    push("checkpoint.path", o.checkpoint.as_ref().map(|p| p.display().to_string()));
    push("out.dir", o.out.as_ref().map(|p| p.display().to_string()));
    pairs
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (overrides, handler) = cli.command.parts();
    let file = match &overrides.config {
        Some(path) => config::read_config_file(path)?,
        None => Default::default(),
    };
    let config = RunConfig::from_raw(file, collect_overrides(overrides))?;
    handler(&config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(message)) => {
            eprintln!(
                "{}",
                serde_json::json!({"kind": "config", "error": message})
            );
            ExitCode::from(2)
        }
        Err(CliError::Run(message)) => {
            eprintln!("{}", serde_json::json!({"kind": "run", "error": message}));
            ExitCode::from(1)
        }
    }
}
