//! Metrics, experiment grids over missing-data mechanisms, the ablation
//! registry, and attention-mass summaries.
//!
//! Every metric is computed in normalized space over evaluation cells only.
//! Normalized errors put datasets with wildly different physical units on a
//! single scale, and the evaluation mask is the sole arbiter of which cells
//! count: the model never sees those cells — not even through the
//! normalization statistics, which are fit on the corrupted observations.

use std::env;
use std::path::Path;
use std::time::Instant;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::{
    apply_norm_stats, build_gaussian_adjacency, normalize, transitions, window_split,
    GeoMetric, LoadSchema, SpatioTemporalDataset,
};
use crate::error::{Error, Result};
use crate::masking::{apply_mechanism, MaskMechanism};
use crate::model::{
    bind_model, forward, impute_normalized, train, GsliModel, ModelConfig, SpatialMode,
    TrainConfig, VariantSpec,
};
use crate::tape::Tape;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn error_sums(
    pred: &Array3<f64>,
    truth: &Array3<f64>,
    eval_mask: &Array3<bool>,
) -> Result<(f64, f64, usize)> {
    if pred.shape() != truth.shape() || pred.shape() != eval_mask.shape() {
        return Err(Error::shape(
            "metrics",
            format!(
                "prediction {:?}, truth {:?}, and eval mask {:?} disagree",
                pred.shape(),
                truth.shape(),
                eval_mask.shape()
            ),
        ));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    for (idx, &keep) in eval_mask.indexed_iter() {
        if keep {
            let r = pred[idx] - truth[idx];
            sq += r * r;
            abs += r.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate(
            "metrics: evaluation mask selects no cells".into(),
        ));
    }
    Ok((sq, abs, count))
}

/// Root mean squared error over evaluation cells.
pub fn rmse(
    pred: &Array3<f64>,
    truth: &Array3<f64>,
    eval_mask: &Array3<bool>,
) -> Result<f64> {
    let (sq, _, count) = error_sums(pred, truth, eval_mask)?;
    Ok((sq / count as f64).sqrt())
}

/// Mean absolute error over evaluation cells.
pub fn mae(
    pred: &Array3<f64>,
    truth: &Array3<f64>,
    eval_mask: &Array3<bool>,
) -> Result<f64> {
    let (_, abs, count) = error_sums(pred, truth, eval_mask)?;
    Ok(abs / count as f64)
}

// ---------------------------------------------------------------------------
// Experiment grids
// ---------------------------------------------------------------------------

/// The reported evaluation protocol repeats every experiment over a run of
/// consecutive seeds; this builds such a run from a base seed.
pub fn consecutive_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Short lowercase tag used in reports and file names.
pub fn mechanism_label(mechanism: &MaskMechanism) -> &'static str {
    match mechanism {
        MaskMechanism::Mcar => "mcar",
        MaskMechanism::Mar { .. } => "mar",
        MaskMechanism::Mnar { .. } => "mnar",
    }
}

/// Full cross product of mechanisms, rates, and seeds, sharing one model
/// and training configuration. `train.seed` is ignored; each grid cell
/// derives its own streams from the cell seed.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentGrid {
    pub mechanisms: Vec<MaskMechanism>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.mechanisms.is_empty() || self.rates.is_empty() || self.seeds.is_empty() {
            return Err(Error::parameter(
                "grid",
                "mechanisms, rates, and seeds must each name at least one entry",
            ));
        }
        for &rate in &self.rates {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::parameter(
                    "grid",
                    format!("rate {rate} outside (0, 1)"),
                ));
            }
        }
        Ok(())
    }
}

/// One trained-and-scored grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub mechanism: String,
    pub rate: f64,
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub wall_secs: f64,
}

/// Seed-averaged metrics of one (mechanism, rate) group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub mechanism: String,
    pub rate: f64,
    pub runs: usize,
    pub mean_rmse: f64,
    pub mean_mae: f64,
}

/// Every run, the seed-averaged groups, and the exact configuration that
/// produced them.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub variant: String,
    pub grid: ExperimentGrid,
    pub runs: Vec<RunRecord>,
    pub groups: Vec<GroupSummary>,
}

/// Corrupts, trains, imputes, and scores one grid cell.
///
/// The cell seed drives the evaluation split and the training-mask stream;
/// parameter initialization uses the next seed so the weight draw is not
/// the mask draw replayed.
fn run_cell(
    dataset: &SpatioTemporalDataset,
    mechanism: &MaskMechanism,
    rate: f64,
    seed: u64,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<RunRecord> {
    let started = Instant::now();
    let split = apply_mechanism(dataset, mechanism, rate, seed)?;
    let mut corrupted = dataset.clone();
    corrupted.mask = split.corrupted_mask.clone();
    let (normalized, stats) = normalize(&corrupted)?;

    let mut model = GsliModel::init(model_cfg, seed.wrapping_add(1));
    let tcfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    train(&mut model, &normalized, &tcfg)?;

    let pred = impute_normalized(&model, &normalized)?;
    let truth = apply_norm_stats(&dataset.values, &dataset.mask, &stats)?;
    let rmse_v = rmse(&pred, &truth, &split.eval_mask)?;
    let mae_v = mae(&pred, &truth, &split.eval_mask)?;
    assert!(rmse_v >= mae_v, "rmse {rmse_v} fell below mae {mae_v}");
    Ok(RunRecord {
        mechanism: mechanism_label(mechanism).to_string(),
        rate,
        seed,
        rmse: rmse_v,
        mae: mae_v,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Runs the whole grid. Cells are independent jobs and run in parallel;
/// the report lists them in grid order (mechanism-major, then rate, then
/// seed) regardless of scheduling.
pub fn run_experiment(
    dataset: &SpatioTemporalDataset,
    grid: &ExperimentGrid,
) -> Result<ExperimentReport> {
    grid.validate()?;
    let mut cells = Vec::new();
    for mechanism in &grid.mechanisms {
        for &rate in &grid.rates {
            for &seed in &grid.seeds {
                cells.push((mechanism.clone(), rate, seed));
            }
        }
    }
    let runs: Vec<RunRecord> = cells
        .par_iter()
        .map(|(mechanism, rate, seed)| {
            run_cell(dataset, mechanism, *rate, *seed, &grid.model, &grid.train).map_err(
                |e| {
                    Error::Numeric {
                        context: format!(
                            "grid cell {}/{rate}/{seed}",
                            mechanism_label(mechanism)
                        ),
                        message: e.to_string(),
                    }
                },
            )
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::new();
    for mechanism in &grid.mechanisms {
        for &rate in &grid.rates {
            let members: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.mechanism == mechanism_label(mechanism) && r.rate == rate)
                .collect();
            let count = members.len() as f64;
            groups.push(GroupSummary {
                mechanism: mechanism_label(mechanism).to_string(),
                rate,
                runs: members.len(),
                mean_rmse: members.iter().map(|r| r.rmse).sum::<f64>() / count,
                mean_mae: members.iter().map(|r| r.mae).sum::<f64>() / count,
            });
        }
    }
    let variant = if grid.model.variant == VariantSpec::FULL {
        "full".to_string()
    } else {
        "custom".to_string()
    };
    Ok(ExperimentReport {
        variant,
        grid: grid.clone(),
        runs,
        groups,
    })
}

// ---------------------------------------------------------------------------
// Ablation registry
// ---------------------------------------------------------------------------

/// Registry keys accepted by [`lookup_variant`], besides `full`.
pub const ABLATION_KEYS: [&str; 9] = [
    "TemporalGCN",
    "TemporalFeatureRL",
    "no-cross-temporal",
    "no-cross-feature",
    "no-feature-split-scale",
    "no-prominence",
    "no-node-scale",
    "no-feature-scale",
    "no-GSL",
];

/// Resolves a registry key to the architectural switches it stands for.
///
/// * `full` — everything on.
/// * `TemporalGCN` — temporal attention plus diffusion convolution over the
///   given adjacency; no learned graphs, no cross-feature attention.
/// * `TemporalFeatureRL` — both attention stages, no spatial stage.
/// * `no-cross-temporal` / `no-cross-feature` — full minus one attention
///   stage.
/// * `no-feature-split-scale` — one learned station graph shared by all
///   features, convolved over `F * C`-wide signals.
/// * `no-prominence` — full, with raw embeddings feeding the graph learner.
/// * `no-node-scale` / `no-feature-scale` — full minus one of the split
///   spatial branches.
/// * `no-GSL` — no learned graphs at all: given adjacency convolution
///   between the two attention stages.
pub fn lookup_variant(key: &str) -> Result<VariantSpec> {
    let full = VariantSpec::FULL;
    match key {
        "full" => Ok(full),
        "TemporalGCN" => Ok(VariantSpec {
            cross_temporal: true,
            cross_feature: false,
            prominence: false,
            spatial: SpatialMode::Canonical { learned: false },
        }),
        "TemporalFeatureRL" => Ok(VariantSpec {
            cross_temporal: true,
            cross_feature: true,
            prominence: false,
            spatial: SpatialMode::None,
        }),
        "no-cross-temporal" => Ok(VariantSpec {
            cross_temporal: false,
            ..full
        }),
        "no-cross-feature" => Ok(VariantSpec {
            cross_feature: false,
            ..full
        }),
        "no-feature-split-scale" => Ok(VariantSpec {
            spatial: SpatialMode::Canonical { learned: true },
            ..full
        }),
        "no-prominence" => Ok(VariantSpec {
            prominence: false,
            ..full
        }),
        "no-node-scale" => Ok(VariantSpec {
            spatial: SpatialMode::SplitScales {
                node_scale: false,
                feature_scale: true,
            },
            ..full
        }),
        "no-feature-scale" => Ok(VariantSpec {
            spatial: SpatialMode::SplitScales {
                node_scale: true,
                feature_scale: false,
            },
            ..full
        }),
        "no-GSL" => Ok(VariantSpec {
            cross_temporal: true,
            cross_feature: true,
            prominence: false,
            spatial: SpatialMode::Canonical { learned: false },
        }),
        other => Err(Error::parameter(
            "variant",
            format!(
                "unknown key '{other}'; expected full or one of {}",
                ABLATION_KEYS.join(", ")
            ),
        )),
    }
}

/// Runs the grid with the named architecture variant substituted in.
pub fn ablate(
    dataset: &SpatioTemporalDataset,
    key: &str,
    grid: &ExperimentGrid,
) -> Result<ExperimentReport> {
    let variant = lookup_variant(key)?;
    let mut modified = grid.clone();
    modified.model.variant = variant;
    let mut report = run_experiment(dataset, &modified)?;
    report.variant = key.to_string();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Attention-mass summaries
// ---------------------------------------------------------------------------

/// Mean incoming cross-feature attention mass, grouped by station and by
/// feature. Each group vector sums to 1.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionStats {
    pub station_ids: Vec<String>,
    pub feature_ids: Vec<String>,
    pub station_scores: Vec<f64>,
    pub feature_scores: Vec<f64>,
}

/// Measures how the final layer's cross-feature attention distributes its
/// mass over the `N * F` tokens, averaged over every query, timestamp, and
/// window of the dataset.
///
/// `dataset` must be normalized the same way the model was trained;
/// missing cells are zero-filled exactly as during training. Errors when
/// the variant never runs cross-feature attention, since there is nothing
/// to measure.
pub fn attention_stats(
    model: &GsliModel,
    dataset: &SpatioTemporalDataset,
) -> Result<AttentionStats> {
    if !model.config.variant.cross_feature {
        return Err(Error::parameter(
            "variant",
            "cross-feature attention is disabled; no scores to collect",
        ));
    }
    let (n, t, f) = (dataset.n(), dataset.t(), dataset.f());
    if n != model.config.n || f != model.config.f {
        return Err(Error::shape(
            "attention_stats",
            format!(
                "dataset is {n} stations x {f} features, model expects {} x {}",
                model.config.n, model.config.f
            ),
        ));
    }
    let t_w = model.config.t_w;
    let windows = window_split(t, t_w, t_w)?;
    let trans = transitions(&dataset.adjacency);
    let tokens = n * f;
    let mut mass = vec![0.0f64; tokens];
    let mut steps = 0.0f64;
    for w in &windows {
        let x_input = Array3::from_shape_fn((n, t_w, f), |(i, s, feat)| {
            if dataset.mask[[i, w.start + s, feat]] {
                dataset.values[[i, w.start + s, feat]]
            } else {
                0.0
            }
        });
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, model, &trans);
        let x = tape.constant(x_input.into_dyn());
        let artifacts = forward(&mut tape, &bound, x)?;
        let weights = artifacts
            .cf_weights
            .last()
            .expect("cross-feature stage ran");
        let w_val = tape.value(*weights);
        // [T_w, tokens, tokens]: rows are queries, columns receive mass.
        for s in 0..t_w {
            for i in 0..tokens {
                for j in 0..tokens {
                    mass[j] += w_val[[s, i, j]] / tokens as f64;
                }
            }
            steps += 1.0;
        }
    }
    for m in mass.iter_mut() {
        *m /= steps;
    }
    let station_scores: Vec<f64> = (0..n)
        .map(|i| (0..f).map(|feat| mass[i * f + feat]).sum())
        .collect();
    let feature_scores: Vec<f64> = (0..f)
        .map(|feat| (0..n).map(|i| mass[i * f + feat]).sum())
        .collect();
    Ok(AttentionStats {
        station_ids: dataset.node_ids.clone(),
        feature_ids: dataset.feature_ids.clone(),
        station_scores,
        feature_scores,
    })
}

// ---------------------------------------------------------------------------
// Report export
// ---------------------------------------------------------------------------

/// Writes the full report, configuration echo included, as pretty JSON.
pub fn write_report_json(path: &Path, report: &ExperimentReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Numeric {
            context: "report serialization".into(),
            message: e.to_string(),
        })?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes one CSV row per run: `mechanism,rate,seed,rmse,mae,wall_secs`.
pub fn write_runs_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    writer
        .write_record(["mechanism", "rate", "seed", "rmse", "mae", "wall_secs"])
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    for run in &report.runs {
        writer
            .write_record([
                run.mechanism.clone(),
                run.rate.to_string(),
                run.seed.to_string(),
                run.rmse.to_string(),
                run.mae.to_string(),
                run.wall_secs.to_string(),
            ])
            .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(display, e))
}

/// Writes station and feature attention scores as `group,id,score` rows.
pub fn write_attention_csv(path: &Path, stats: &AttentionStats) -> Result<()> {
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    writer
        .write_record(["group", "id", "score"])
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    for (id, score) in stats.station_ids.iter().zip(&stats.station_scores) {
        writer
            .write_record(["station", id, &score.to_string()])
            .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    }
    for (id, score) in stats.feature_ids.iter().zip(&stats.feature_scores) {
        writer
            .write_record(["feature", id, &score.to_string()])
            .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(display, e))
}

// ---------------------------------------------------------------------------
// The seven-station wind benchmark
// ---------------------------------------------------------------------------

/// Environment variable naming a directory with the real wind measurements:
/// `measurements.csv` (long form, default schema) and `stations.csv`
/// (`node_id,lat,lon`).
pub const WIND_DATA_ENV: &str = "GSLI_DUTCHWIND_DIR";

const WIND_N: usize = 7;
const WIND_T: usize = 8688;
const WIND_F: usize = 4;

/// Coordinates of the seven stations used when synthesizing the benchmark;
/// a rough coastal-to-inland spread.
const WIND_COORDS: [(f64, f64); WIND_N] = [
    (52.92, 4.78),
    (53.22, 5.75),
    (52.65, 4.98),
    (52.10, 5.18),
    (51.97, 4.93),
    (51.45, 5.42),
    (52.43, 6.26),
];

/// Loads the seven-station hourly wind benchmark.
///
/// With [`WIND_DATA_ENV`] set, the real measurements are read from that
/// directory. Otherwise a deterministic surrogate with the same shape
/// (7 stations, 8688 hourly steps, 4 features, just under 1% missing) is
/// synthesized: seasonal and per-station-phased diurnal cycles, a slowly
/// mixing regional component, a station-coupled local field, and a
/// heavy-tailed observation noise whose occasional large excursions are
/// what imputation actually has to ride out.
pub fn dutchwind_dataset() -> Result<SpatioTemporalDataset> {
    if let Ok(dir) = env::var(WIND_DATA_ENV) {
        let dir = Path::new(&dir);
        let (node_ids, coords) =
            crate::datamodel::load_coordinates(&dir.join("stations.csv"))?;
        let adjacency = build_gaussian_adjacency(&coords, GeoMetric::Haversine, 0.1)?;
        return crate::datamodel::load_dataset(
            &dir.join("measurements.csv"),
            node_ids,
            adjacency,
            &LoadSchema::default(),
        );
    }
    synth_wind_surrogate()
}

/// Per-feature signal composition of the surrogate: physical offset and
/// scale, then the relative strengths of the shared cycles, the regional
/// component, and the station-local field.
struct WindFeature {
    base: f64,
    scale: f64,
    season_amp: f64,
    diurnal_amp: f64,
    regional_amp: f64,
    local_amp: f64,
    local_hop: usize,
}

const WIND_FEATURES: [WindFeature; WIND_F] = [
    // wind speed: regional weather dominates, mild diurnal swing
    WindFeature {
        base: 5.2,
        scale: 2.6,
        season_amp: 1.0,
        diurnal_amp: 0.12,
        regional_amp: 1.2,
        local_amp: 0.45,
        local_hop: 1,
    },
    // gust factor: like speed but with local structure two neighbors wide
    WindFeature {
        base: 8.1,
        scale: 3.9,
        season_amp: 0.9,
        diurnal_amp: 0.15,
        regional_amp: 1.1,
        local_amp: 0.55,
        local_hop: 2,
    },
    // temperature: dominated by the annual cycle
    WindFeature {
        base: 10.4,
        scale: 6.8,
        season_amp: 1.4,
        diurnal_amp: 0.15,
        regional_amp: 1.0,
        local_amp: 0.40,
        local_hop: 1,
    },
    // pressure: slow and regional, barely any diurnal signature
    WindFeature {
        base: 1013.2,
        scale: 9.5,
        season_amp: 1.1,
        diurnal_amp: 0.08,
        regional_amp: 1.3,
        local_amp: 0.35,
        local_hop: 3,
    },
];

/// Observation-noise mixture: most readings carry a small error, a fixed
/// fraction carry a large one.
const WIND_NOISE_P_BIG: f64 = 0.20;
const WIND_NOISE_BIG: f64 = 0.45;
const WIND_NOISE_SMALL: f64 = 0.06;

fn synth_wind_surrogate() -> Result<SpatioTemporalDataset> {
    let (n, t, f_len) = (WIND_N, WIND_T, WIND_F);
    let mut rng = ChaCha8Rng::seed_from_u64(0x57_49_4e_44);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut values = Array3::<f64>::zeros((n, t, f_len));

    // Station phases for the diurnal cycle: coastal stations lead.
    let phases: Vec<f64> = (0..n).map(|i| 0.35 * i as f64).collect();

    for (f, feat) in WIND_FEATURES.iter().enumerate() {
        // Regional component: one slowly mixing AR stream per feature.
        let mut regional = 0.0f64;
        // Local field: per-station AR states coupled along a ring of
        // width `local_hop`, so neighboring stations carry usable
        // information about a hidden one.
        let mut local: Vec<f64> = (0..n).map(|_| 0.6 * normal.sample(&mut rng)).collect();
        for step in 0..t {
            // Both latent fields move far slower than the hourly sampling, so
            // the panel's short-range future is well determined by its recent
            // past; what keeps imputation honest is the observation noise.
            regional = 0.999 * regional + 0.045 * normal.sample(&mut rng);
            let mixed: Vec<f64> = (0..n)
                .map(|i| {
                    let left = local[(i + n - feat.local_hop) % n];
                    let right = local[(i + feat.local_hop) % n];
                    0.5 * local[i] + 0.25 * left + 0.25 * right
                })
                .collect();
            for (i, slot) in local.iter_mut().enumerate() {
                *slot = 0.9975 * mixed[i] + 0.042 * normal.sample(&mut rng);
            }
            let season =
                feat.season_amp * (std::f64::consts::TAU * step as f64 / 8766.0).sin();
            for i in 0..n {
                let diurnal = feat.diurnal_amp
                    * (std::f64::consts::TAU * step as f64 / 24.0 + phases[i]).sin();
                let noise = if rng.random::<f64>() < WIND_NOISE_P_BIG {
                    WIND_NOISE_BIG * normal.sample(&mut rng)
                } else {
                    WIND_NOISE_SMALL * normal.sample(&mut rng)
                };
                let signal = season
                    + diurnal
                    + feat.regional_amp * regional
                    + feat.local_amp * local[i]
                    + noise;
                values[[i, step, f]] = feat.base + feat.scale * signal;
            }
        }
    }

    // Missingness: scattered dropouts plus one multi-hour outage per
    // (station, feature) series, landing just under 1% overall.
    let mut mask = Array3::<bool>::from_elem((n, t, f_len), true);
    for i in 0..n {
        for f in 0..f_len {
            for s in 0..t {
                if rng.random::<f64>() < 0.006 {
                    mask[[i, s, f]] = false;
                }
            }
            let len = rng.random_range(12..=36);
            let start = rng.random_range(0..t - len);
            for s in start..start + len {
                mask[[i, s, f]] = false;
            }
        }
    }

    let adjacency = build_gaussian_adjacency(&WIND_COORDS, GeoMetric::Haversine, 0.1)?;
    let dataset = SpatioTemporalDataset {
        values,
        mask,
        node_ids: (0..n).map(|i| format!("wind{i}")).collect(),
        feature_ids: vec![
            "speed".into(),
            "gust".into(),
            "temperature".into(),
            "pressure".into(),
        ],
        timestamps: (0..t as i64).collect(),
        adjacency,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::TrainingPattern;

    fn toy_arrays(seed: u64) -> (Array3<f64>, Array3<f64>, Array3<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pred = Array3::from_shape_fn((5, 10, 4), |_| normal.sample(&mut rng));
        let truth = Array3::from_shape_fn((5, 10, 4), |_| normal.sample(&mut rng));
        let mask = Array3::from_shape_fn((5, 10, 4), |_| rng.random::<f64>() < 0.3);
        (pred, truth, mask)
    }

    /// Small synthetic panel: per-station sinusoids plus noise, uniform
    /// adjacency, fully observed.
    fn toy_dataset(n: usize, t: usize, f_len: usize, seed: u64) -> SpatioTemporalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let values = Array3::from_shape_fn((n, t, f_len), |(i, s, feat)| {
            let phase = 0.5 * i as f64 + 0.9 * feat as f64;
            (std::f64::consts::TAU * s as f64 / 12.0 + phase).sin()
                + 0.3 * normal.sample(&mut rng)
        });
        SpatioTemporalDataset {
            values,
            mask: Array3::from_elem((n, t, f_len), true),
            node_ids: (0..n).map(|i| format!("s{i}")).collect(),
            feature_ids: (0..f_len).map(|f| format!("f{f}")).collect(),
            timestamps: (0..t as i64).collect(),
            adjacency: Array2::from_shape_fn((n, n), |(i, j)| {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }),
        }
    }

    fn tiny_grid(seeds: Vec<u64>, n: usize, f_len: usize) -> ExperimentGrid {
        ExperimentGrid {
            mechanisms: vec![MaskMechanism::Mcar],
            rates: vec![0.15],
            seeds,
            model: ModelConfig {
                c: 2,
                d: 2,
                k: 1,
                l: 1,
                ..ModelConfig::new(n, f_len, VariantSpec::FULL)
            },
            train: TrainConfig {
                epochs: 2,
                pattern: TrainingPattern::Random,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let (_, truth, mask) = toy_arrays(1);
        assert_eq!(rmse(&truth, &truth, &mask).unwrap(), 0.0);
        assert_eq!(mae(&truth, &truth, &mask).unwrap(), 0.0);
    }

    #[test]
    fn two_cell_case_matches_hand_arithmetic() {
        let mut pred = Array3::<f64>::zeros((1, 2, 1));
        let truth = Array3::<f64>::zeros((1, 2, 1));
        let mask = Array3::from_elem((1, 2, 1), true);
        pred[[0, 0, 0]] = 1.0;
        pred[[0, 1, 0]] = 2.0;
        assert!((rmse(&pred, &truth, &mask).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((mae(&pred, &truth, &mask).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_a_scalar_loop() {
        let (pred, truth, mask) = toy_arrays(7);
        let mut sq = 0.0;
        let mut abs = 0.0;
        let mut count = 0.0;
        for i in 0..5 {
            for s in 0..10 {
                for f in 0..4 {
                    if mask[[i, s, f]] {
                        let r = pred[[i, s, f]] - truth[[i, s, f]];
                        sq += r * r;
                        abs += r.abs();
                        count += 1.0;
                    }
                }
            }
        }
        assert!((rmse(&pred, &truth, &mask).unwrap() - (sq / count).sqrt()).abs() < 1e-12);
        assert!((mae(&pred, &truth, &mask).unwrap() - abs / count).abs() < 1e-12);
    }

    #[test]
    fn empty_eval_mask_is_an_error() {
        let (pred, truth, _) = toy_arrays(3);
        let mask = Array3::from_elem((5, 10, 4), false);
        assert!(rmse(&pred, &truth, &mask).is_err());
        assert!(mae(&pred, &truth, &mask).is_err());
    }

    #[test]
    fn rmse_dominates_mae() {
        let (pred, truth, mask) = toy_arrays(11);
        assert!(rmse(&pred, &truth, &mask).unwrap() >= mae(&pred, &truth, &mask).unwrap());
    }

    #[test]
    fn metrics_ignore_poisoned_non_eval_cells() {
        let (mut pred, mut truth, mask) = toy_arrays(13);
        let before = (
            rmse(&pred, &truth, &mask).unwrap(),
            mae(&pred, &truth, &mask).unwrap(),
        );
        for (idx, &keep) in mask.indexed_iter() {
            if !keep {
                pred[idx] = 1e9;
                truth[idx] = -1e9;
            }
        }
        let after = (
            rmse(&pred, &truth, &mask).unwrap(),
            mae(&pred, &truth, &mask).unwrap(),
        );
        assert_eq!(before, after);
    }

    #[test]
    fn seed_run_is_consecutive() {
        assert_eq!(consecutive_seeds(3407, 5), vec![3407, 3408, 3409, 3410, 3411]);
    }

    #[test]
    fn registry_resolves_every_key_and_rejects_unknown_ones() {
        assert_eq!(lookup_variant("full").unwrap(), VariantSpec::FULL);
        for key in ABLATION_KEYS {
            let variant = lookup_variant(key).unwrap();
            assert_ne!(variant, VariantSpec::FULL, "{key} must differ from full");
        }
        assert_eq!(
            lookup_variant("no-GSL").unwrap().spatial,
            SpatialMode::Canonical { learned: false }
        );
        assert!(!lookup_variant("no-prominence").unwrap().prominence);
        assert!(lookup_variant("No-GSL").is_err());
        assert!(lookup_variant("").is_err());
    }

    #[test]
    fn grid_report_counts_runs_and_groups() {
        let dataset = toy_dataset(3, 72, 2, 21);
        let grid = tiny_grid(vec![11, 12], 3, 2);
        let report = run_experiment(&dataset, &grid).unwrap();
        assert_eq!(report.variant, "full");
        assert_eq!(report.runs.len(), 2);
        assert_eq!(report.groups.len(), 1);
        assert_eq!(report.groups[0].runs, 2);
        let expected =
            (report.runs[0].rmse + report.runs[1].rmse) / 2.0;
        assert!((report.groups[0].mean_rmse - expected).abs() < 1e-15);
        for run in &report.runs {
            assert!(run.rmse >= run.mae);
            assert!(run.rmse.is_finite());
        }
    }

    #[test]
    fn reports_are_deterministic_per_seed() {
        let dataset = toy_dataset(3, 72, 2, 22);
        let grid = tiny_grid(vec![5], 3, 2);
        let a = run_experiment(&dataset, &grid).unwrap();
        let b = run_experiment(&dataset, &grid).unwrap();
        assert_eq!(a.runs[0].rmse.to_bits(), b.runs[0].rmse.to_bits());
        assert_eq!(a.runs[0].mae.to_bits(), b.runs[0].mae.to_bits());
    }

    #[test]
    fn ablation_report_is_stamped_with_its_key() {
        let dataset = toy_dataset(3, 48, 2, 23);
        let mut grid = tiny_grid(vec![9], 3, 2);
        grid.train.epochs = 1;
        let report = ablate(&dataset, "no-prominence", &grid).unwrap();
        assert_eq!(report.variant, "no-prominence");
        assert!(ablate(&dataset, "nonsense", &grid).is_err());
    }

    #[test]
    fn uniform_attention_mass_splits_evenly() {
        let dataset = toy_dataset(3, 12, 2, 31);
        let config = ModelConfig {
            c: 2,
            d: 2,
            k: 1,
            l: 1,
            t_w: 6,
            ..ModelConfig::new(3, 2, VariantSpec::FULL)
        };
        let mut model = GsliModel::init(&config, 5);
        // Zero queries and keys make every attention row uniform.
        model.visit_mut(&mut |name, mut view| {
            if name.ends_with("cf.wq") || name.ends_with("cf.wk") {
                view.fill(0.0);
            }
        });
        let stats = attention_stats(&model, &dataset).unwrap();
        for score in &stats.station_scores {
            assert!((score - 1.0 / 3.0).abs() < 1e-9);
        }
        for score in &stats.feature_scores {
            assert!((score - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_scores_sum_to_one_per_group() {
        let dataset = toy_dataset(4, 24, 3, 33);
        let config = ModelConfig {
            c: 2,
            d: 2,
            k: 1,
            l: 2,
            t_w: 12,
            ..ModelConfig::new(4, 3, VariantSpec::FULL)
        };
        let model = GsliModel::init(&config, 6);
        let stats = attention_stats(&model, &dataset).unwrap();
        let stations: f64 = stats.station_scores.iter().sum();
        let features: f64 = stats.feature_scores.iter().sum();
        assert!((stations - 1.0).abs() < 1e-9);
        assert!((features - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_stats_require_the_cross_feature_stage() {
        let dataset = toy_dataset(3, 12, 2, 35);
        let config = ModelConfig {
            c: 2,
            d: 2,
            k: 1,
            l: 1,
            t_w: 6,
            ..ModelConfig::new(
                3,
                2,
                VariantSpec {
                    cross_feature: false,
                    ..VariantSpec::FULL
                },
            )
        };
        let model = GsliModel::init(&config, 7);
        assert!(attention_stats(&model, &dataset).is_err());
    }

    #[test]
    fn report_files_round_trip_through_disk() {
        let dataset = toy_dataset(3, 48, 2, 41);
        let mut grid = tiny_grid(vec![2], 3, 2);
        grid.train.epochs = 1;
        let report = run_experiment(&dataset, &grid).unwrap();
        let dir = std::env::temp_dir().join("gsli_eval_export_test");
        std::fs::create_dir_all(&dir).unwrap();
        let json_path = dir.join("report.json");
        let csv_path = dir.join("runs.csv");
        write_report_json(&json_path, &report).unwrap();
        write_runs_csv(&csv_path, &report).unwrap();
        let text = std::fs::read_to_string(&json_path).unwrap();
        assert!(text.contains("\"mean_rmse\""));
        let csv_text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv_text.lines().count(), 1 + report.runs.len());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn wind_surrogate_has_the_documented_shape() {
        let ds = dutchwind_dataset().unwrap();
        assert_eq!(ds.values.shape(), &[7, 8688, 4]);
        let missing = ds.missing_fraction();
        assert!(
            missing > 0.004 && missing < 0.015,
            "missing fraction {missing} strayed from the documented ~1%"
        );
        ds.validate().unwrap();
    }

    #[test]
    fn wind_surrogate_is_deterministic() {
        let a = dutchwind_dataset().unwrap();
        let b = dutchwind_dataset().unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.mask, b.mask);
    }

    /// Regenerates the surrogate's noiseless signal with the same RNG
    /// stream, by mirroring the generator loop and skipping only the
    /// observation-noise contribution.
    fn wind_signal() -> Array3<f64> {
        let (n, t, f_len) = (WIND_N, WIND_T, WIND_F);
        let mut rng = ChaCha8Rng::seed_from_u64(0x57_49_4e_44);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut signal = Array3::<f64>::zeros((n, t, f_len));
        let phases: Vec<f64> = (0..n).map(|i| 0.35 * i as f64).collect();
        for (f, feat) in WIND_FEATURES.iter().enumerate() {
            let mut regional = 0.0f64;
            let mut local: Vec<f64> =
                (0..n).map(|_| 0.6 * normal.sample(&mut rng)).collect();
            for step in 0..t {
                regional = 0.999 * regional + 0.045 * normal.sample(&mut rng);
                let mixed: Vec<f64> = (0..n)
                    .map(|i| {
                        let left = local[(i + n - feat.local_hop) % n];
                        let right = local[(i + feat.local_hop) % n];
                        0.5 * local[i] + 0.25 * left + 0.25 * right
                    })
                    .collect();
                for (i, slot) in local.iter_mut().enumerate() {
                    *slot = 0.9975 * mixed[i] + 0.042 * normal.sample(&mut rng);
                }
                let season =
                    feat.season_amp * (std::f64::consts::TAU * step as f64 / 8766.0).sin();
                for i in 0..n {
                    let diurnal = feat.diurnal_amp
                        * (std::f64::consts::TAU * step as f64 / 24.0 + phases[i]).sin();
                    let _ = if rng.random::<f64>() < WIND_NOISE_P_BIG {
                        WIND_NOISE_BIG * normal.sample(&mut rng)
                    } else {
                        WIND_NOISE_SMALL * normal.sample(&mut rng)
                    };
                    let s = season
                        + diurnal
                        + feat.regional_amp * regional
                        + feat.local_amp * local[i];
                    signal[[i, step, f]] = feat.base + feat.scale * s;
                }
            }
        }
        signal
    }

    #[test]
    #[ignore]
    fn wind_references() {
        let dataset = dutchwind_dataset().unwrap();
        let signal = wind_signal();
        let split =
            crate::masking::apply_mechanism(&dataset, &MaskMechanism::Mcar, 0.1, 3407)
                .unwrap();
        let mut corrupted = dataset.clone();
        corrupted.mask = split.corrupted_mask.clone();
        let (_, stats) = crate::datamodel::normalize(&corrupted).unwrap();
        let full = Array3::from_elem(dataset.values.dim(), true);
        let truth_n =
            crate::datamodel::apply_norm_stats(&dataset.values, &full, &stats).unwrap();
        let signal_n = crate::datamodel::apply_norm_stats(&signal, &full, &stats).unwrap();
        println!(
            "noise floor: rmse={:.4} mae={:.4}",
            rmse(&signal_n, &truth_n, &split.eval_mask).unwrap(),
            mae(&signal_n, &truth_n, &split.eval_mask).unwrap()
        );

        // Window-mean imputer: per (station, feature), each 24-step tile is
        // filled with the mean of its observed entries.
        let (n, t, f_len) = dataset.values.dim();
        let corr_n = crate::datamodel::apply_norm_stats(
            &dataset.values,
            &split.corrupted_mask,
            &stats,
        )
        .unwrap();
        let mut wm = Array3::<f64>::zeros((n, t, f_len));
        for w in crate::datamodel::window_split(t, 24, 24).unwrap() {
            let (lo, hi) = (w.start, w.end());
            for i in 0..n {
                for f in 0..f_len {
                    let (mut sum, mut cnt) = (0.0, 0usize);
                    for s in lo..hi {
                        if split.corrupted_mask[[i, s, f]] {
                            sum += corr_n[[i, s, f]];
                            cnt += 1;
                        }
                    }
                    let mean = if cnt > 0 { sum / cnt as f64 } else { 0.0 };
                    for s in lo..hi {
                        wm[[i, s, f]] = mean;
                    }
                }
            }
        }
        println!(
            "window mean: rmse={:.4} mae={:.4}",
            rmse(&wm, &truth_n, &split.eval_mask).unwrap(),
            mae(&wm, &truth_n, &split.eval_mask).unwrap()
        );
    }

    #[test]
    #[ignore]
    fn wind_probe() {
        let dataset = dutchwind_dataset().unwrap();
        let combos: [(usize, f64, f64); 3] = [(32, 1e-3, 0.2), (36, 1e-3, 0.2), (40, 1e-3, 0.2)];
        for (epochs, lr, ratio) in combos {
            let grid = ExperimentGrid {
                mechanisms: vec![MaskMechanism::Mcar],
                rates: vec![0.1],
                seeds: vec![3407],
                model: ModelConfig {
                    c: 8,
                    d: 8,
                    ..ModelConfig::new(7, 4, VariantSpec::FULL)
                },
                train: TrainConfig {
                    epochs,
                    learning_rate: lr,
                    mask_ratio: ratio,
                    ..TrainConfig::default()
                },
            };
            let t0 = Instant::now();
            let report = run_experiment(&dataset, &grid).unwrap();
            let run = &report.runs[0];
            println!(
                "epochs={epochs} lr={lr} ratio={ratio}: rmse={:.4} mae={:.4} ({:.1}s)",
                run.rmse,
                run.mae,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
