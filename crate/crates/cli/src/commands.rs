//! Subcommand implementations. Every command resolves its inputs through
//! [`RunConfig`], writes artifacts only under the configured output
//! directory, and drops a `manifest.json` describing exactly what ran.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gsli::datamodel::{
    build_gaussian_adjacency, load_adjacency_csv, load_coordinates, load_dataset, normalize,
    save_adjacency_csv, save_dataset_csv, GeoMetric, LoadSchema, SpatioTemporalDataset,
};
use gsli::evaluation::{
    ablate, dutchwind_dataset, run_experiment, write_report_json, write_runs_csv,
    ExperimentGrid,
};
use gsli::graphlearn::eval_meta_adjacency;
use gsli::model::{impute, load_checkpoint, save_checkpoint, train, GsliModel};
use gsli::oracle::{
    check_propositions, ring_propagation, synth_heterogeneous, PropositionConfig,
    SyntheticSpec,
};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, DatasetSource, RunConfig, SynthParams};

/// Anything that can stop a subcommand: configuration problems exit with
/// status 2, runtime failures with status 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<gsli::Error> for CliError {
    fn from(e: gsli::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

/// The ring synthetic behind `dataset.name = synth`: one ring per feature
/// with hops 1, 2, … so every feature propagates along its own geometry.
fn synth_spec(p: &SynthParams) -> SyntheticSpec {
    SyntheticSpec {
        n: p.n,
        t: p.t,
        propagation: (0..p.f)
            .map(|feat| ring_propagation(p.n, feat + 1, 0.5))
            .collect(),
        noise_std: p.noise,
        seed: p.seed,
    }
}

fn load_source(config: &RunConfig) -> Result<SpatioTemporalDataset> {
    let dataset = match config.require_dataset()? {
        DatasetSource::DutchWind => dutchwind_dataset()?,
        DatasetSource::Synth => synth_heterogeneous(&synth_spec(&config.synth))?,
        DatasetSource::Csv {
            data,
            coords,
            adjacency,
        } => {
            let (node_ids, adjacency) = match (coords, adjacency) {
                (Some(coords), None) => {
                    let (ids, points) = load_coordinates(coords)?;
                    let metric = if config.haversine {
                        GeoMetric::Haversine
                    } else {
                        GeoMetric::Euclidean
                    };
                    let adj =
                        build_gaussian_adjacency(&points, metric, config.gaussian_threshold)?;
                    (ids, adj)
                }
                (None, Some(path)) => load_adjacency_csv(path)?,
                _ => unreachable!("config validation enforces exactly one source"),
            };
            load_dataset(data, node_ids, adjacency, &LoadSchema::default())?
        }
    };
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of the resolved configuration in its canonical `key = value`
/// serialization; two runs with the same hash saw the same settings.
fn config_digest(resolved: &BTreeMap<String, String>) -> String {
    let mut text = String::new();
    for (key, value) in resolved {
        text.push_str(key);
        text.push_str(" = ");
        text.push_str(value);
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

/// Writes `manifest.json`: the command, the full resolved configuration
/// and its hash, the seeds in play, and a checksum per input file (or the
/// builtin generator name) so reports can be traced to their inputs.
fn write_manifest(config: &RunConfig, command: &str, out: &Path) -> Result<()> {
    let mut inputs = serde_json::Map::new();
    match &config.dataset {
        Some(DatasetSource::DutchWind) => {
            inputs.insert("dataset".into(), "builtin:dutchwind".into());
        }
        Some(DatasetSource::Synth) => {
            inputs.insert("dataset".into(), "builtin:synth".into());
        }
        Some(DatasetSource::Csv {
            data,
            coords,
            adjacency,
        }) => {
            inputs.insert(data.display().to_string(), file_sha256(data)?.into());
            for path in [coords, adjacency].into_iter().flatten() {
                inputs.insert(path.display().to_string(), file_sha256(path)?.into());
            }
        }
        None => {}
    }
    if let Some(path) = &config.checkpoint {
        inputs.insert(path.display().to_string(), file_sha256(path)?.into());
    }
    let manifest = serde_json::json!({
        "command": command,
        "created_unix": SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "config": config.resolved,
        "config_sha256": config_digest(&config.resolved),
        "seeds": config.seeds,
        "inputs": inputs,
    });
    let path = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Run(format!("manifest serialization: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn prepare_out(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    Ok(out)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

/// Trains on the configured dataset as-is (training masks its own labels;
/// no evaluation split is involved) and writes `checkpoint.json` plus the
/// per-epoch loss trace.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let dataset = load_source(config)?;
    let out = prepare_out(config)?;
    let (normalized, stats) = normalize(&dataset)?;
    let model_cfg = config.model_config(dataset.n(), dataset.f());
    let mut model = GsliModel::init(&model_cfg, config.train_seed.wrapping_add(1));
    let losses = train(&mut model, &normalized, &config.train_config())?;
    save_checkpoint(&out.join("checkpoint.json"), &model, &stats)?;

    let loss_path = out.join("loss.csv");
    let mut text = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        text.push_str(&format!("{epoch},{loss}\n"));
    }
    std::fs::write(&loss_path, text).map_err(|e| io_err(&loss_path, e))?;
    write_manifest(config, "train", &out)?;
    println!(
        "trained {} epochs; final loss {:.6}; checkpoint at {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        out.join("checkpoint.json").display()
    );
    Ok(())
}

/// Loads a checkpoint, imputes the configured dataset, and writes the
/// model prediction plus the completed series (observed cells untouched).
pub fn cmd_impute(config: &RunConfig) -> Result<()> {
    let checkpoint = config.require_checkpoint()?;
    let (model, stats) = load_checkpoint(checkpoint)?;
    let dataset = load_source(config)?;
    let out = prepare_out(config)?;
    let result = impute(&model, &dataset, &stats)?;

    let mut completed = dataset.clone();
    completed.values = result.completed;
    completed.mask.fill(true);
    save_dataset_csv(&completed, &out.join("completed.csv"))?;
    let mut prediction = dataset.clone();
    prediction.values = result.prediction;
    prediction.mask.fill(true);
    save_dataset_csv(&prediction, &out.join("prediction.csv"))?;
    write_manifest(config, "impute", &out)?;
    println!(
        "imputed {} missing cells; artifacts under {}",
        dataset.mask.len() - dataset.observed_count(),
        out.display()
    );
    Ok(())
}

fn experiment_grid(config: &RunConfig, dataset: &SpatioTemporalDataset) -> ExperimentGrid {
    ExperimentGrid {
        mechanisms: config.mechanisms.clone(),
        rates: config.rates.clone(),
        seeds: config.seeds.clone(),
        model: config.model_config(dataset.n(), dataset.f()),
        train: config.train_config(),
    }
}

fn report_summary(report: &gsli::evaluation::ExperimentReport) -> String {
    report
        .groups
        .iter()
        .map(|g| {
            format!(
                "{} {:.0}%: rmse {:.4} mae {:.4} ({} runs)",
                g.mechanism,
                g.rate * 100.0,
                g.mean_rmse,
                g.mean_mae,
                g.runs
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Runs the full mechanism x rate x seed grid and writes `report.json`
/// and `runs.csv`.
pub fn cmd_evaluate(config: &RunConfig) -> Result<()> {
    let dataset = load_source(config)?;
    let out = prepare_out(config)?;
    let report = run_experiment(&dataset, &experiment_grid(config, &dataset))?;
    write_report_json(&out.join("report.json"), &report)?;
    write_runs_csv(&out.join("runs.csv"), &report)?;
    write_manifest(config, "evaluate", &out)?;
    println!("{}", report_summary(&report));
    Ok(())
}

/// Like `evaluate`, but forces the configured architecture variant and
/// stamps the report with its registry key.
pub fn cmd_ablate(config: &RunConfig) -> Result<()> {
    let dataset = load_source(config)?;
    let out = prepare_out(config)?;
    let report = ablate(&dataset, &config.variant, &experiment_grid(config, &dataset))?;
    write_report_json(&out.join("report.json"), &report)?;
    write_runs_csv(&out.join("runs.csv"), &report)?;
    write_manifest(config, "ablate", &out)?;
    println!("variant {}: {}", report.variant, report_summary(&report));
    Ok(())
}

/// Generates the heterogeneous ring synthetic and writes it in the
/// standard on-disk formats, ready to feed back through `dataset.path`.
pub fn cmd_synth(config: &RunConfig) -> Result<()> {
    let spec = synth_spec(&config.synth);
    let dataset = synth_heterogeneous(&spec)?;
    let out = prepare_out(config)?;
    save_dataset_csv(&dataset, &out.join("measurements.csv"))?;
    save_adjacency_csv(&dataset.adjacency, &dataset.node_ids, &out.join("adjacency.csv"))?;
    for (feat, g) in spec.propagation.iter().enumerate() {
        save_adjacency_csv(g, &dataset.node_ids, &out.join(format!("propagation_f{feat}.csv")))?;
    }
    write_json(
        &out.join("meta.json"),
        &serde_json::json!({
            "n": spec.n,
            "t": spec.t,
            "f": spec.propagation.len(),
            "noise_std": spec.noise_std,
            "seed": spec.seed,
            "ring_hops": (1..=spec.propagation.len()).collect::<Vec<_>>(),
            "self_weight": 0.5,
        }),
    )?;
    write_manifest(config, "synth", &out)?;
    println!(
        "synthesized {} stations x {} steps x {} features under {}",
        spec.n,
        spec.t,
        spec.propagation.len(),
        out.display()
    );
    Ok(())
}

/// Exports every graph a checkpoint has learned: the per-feature
/// station adjacencies, the feature-scale graph, and the canonical shared
/// graph, whichever the variant owns.
pub fn cmd_export_graphs(config: &RunConfig) -> Result<()> {
    let checkpoint = config.require_checkpoint()?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let out = prepare_out(config)?;
    let prominence = model.config.variant.prominence;
    let station_ids: Vec<String> = (0..model.config.n).map(|i| format!("s{i}")).collect();
    let feature_ids: Vec<String> = (0..model.config.f).map(|f| format!("f{f}")).collect();
    let mut exported = Vec::new();
    if let Some(node_graphs) = &model.node_graphs {
        for (feat, params) in node_graphs.per_feature.iter().enumerate() {
            let adj = eval_meta_adjacency(params, prominence);
            let name = format!("node_graph_f{feat}.csv");
            save_adjacency_csv(&adj.0, &station_ids, &out.join(&name))?;
            exported.push(name);
        }
    }
    if let Some(feature_graph) = &model.feature_graph {
        let adj = eval_meta_adjacency(&feature_graph.graph, prominence);
        save_adjacency_csv(&adj.0, &feature_ids, &out.join("feature_graph.csv"))?;
        exported.push("feature_graph.csv".into());
    }
    if let Some(canonical) = &model.canonical_graph {
        let adj = eval_meta_adjacency(canonical, prominence);
        save_adjacency_csv(&adj.0, &station_ids, &out.join("canonical_graph.csv"))?;
        exported.push("canonical_graph.csv".into());
    }
    if exported.is_empty() {
        return Err(CliError::Run(
            "checkpoint variant learns no graphs; nothing to export".into(),
        ));
    }
    write_manifest(config, "export-graphs", &out)?;
    println!("exported {}", exported.join(", "));
    Ok(())
}

/// Runs the numerical demonstration of the framework's two structural
/// claims and emits the JSON verdict; a failing verdict exits non-zero so
/// scripts can gate on it.
pub fn cmd_check_propositions(config: &RunConfig) -> Result<()> {
    let out = prepare_out(config)?;
    let report = check_propositions(&PropositionConfig::standard(config.train_seed))?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Run(format!("verdict serialization: {e}")))?;
    println!("{text}");
    write_json(&out.join("propositions.json"), &report)?;
    write_manifest(config, "check-propositions", &out)?;
    if !report.pass {
        return Err(CliError::Run("propositions failed".into()));
    }
    Ok(())
}
