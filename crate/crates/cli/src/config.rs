//! Run configuration: a flat map of dotted keys that can come from a
//! key-value file, be overridden by flags, and is embedded verbatim into
//! every manifest so a run can be reproduced from its artifacts alone.
//!
//! The file format is one `key = value` pair per line; `#` starts a
//! comment. Every key has exactly one command-line flag counterpart, and
//! flags win over the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use gsli::masking::{MaskMechanism, TrainingPattern};
use gsli::model::{ModelConfig, TrainConfig, VariantSpec};

/// A configuration problem: bad file syntax, an unknown key, or a value
/// that fails validation. Distinct from runtime failures because it maps
/// to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(message: impl Into<String>) -> Result<T> {
    Err(ConfigError(message.into()))
}

/// Where the measurements come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// The built-in seven-station wind benchmark (or the real data when
    /// the override environment variable points at it).
    DutchWind,
    /// The built-in heterogeneous ring synthetic, shaped by the `synth.*`
    /// keys.
    Synth,
    /// Long-form CSV measurements plus either station coordinates (from
    /// which a Gaussian-kernel adjacency is built) or an explicit dense
    /// adjacency CSV.
    Csv {
        data: PathBuf,
        coords: Option<PathBuf>,
        adjacency: Option<PathBuf>,
    },
}

/// Parameters of the built-in ring synthetic.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n: usize,
    pub f: usize,
    pub t: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Fully resolved settings for one invocation. Construction goes through
/// [`RunConfig::from_raw`], which rejects unknown keys and malformed
/// values before any work starts.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: Option<DatasetSource>,
    pub gaussian_threshold: f64,
    pub haversine: bool,
    pub t_w: usize,
    pub stride: usize,
    pub c: usize,
    pub d: usize,
    pub k: usize,
    pub l: usize,
    pub variant: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub mask_ratio: f64,
    pub pattern: TrainingPattern,
    pub train_seed: u64,
    pub mechanisms: Vec<MaskMechanism>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub synth: SynthParams,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// The resolved `key = value` view (defaults included), kept for the
    /// manifest and the config hash.
    pub resolved: BTreeMap<String, String>,
}

/// Every legal key with its default value as a string; `""` marks keys
/// that are unset by default.
const KEY_DEFAULTS: [(&str, &str); 26] = [
    ("dataset.name", ""),
    ("dataset.path", ""),
    ("adjacency.coords", ""),
    ("adjacency.path", ""),
    ("gaussian.threshold", "0.1"),
    ("gaussian.metric", "haversine"),
    ("window.length", "24"),
    ("window.stride", "24"),
    ("model.c", "16"),
    ("model.d", "16"),
    ("model.k", "2"),
    ("model.l", "2"),
    ("model.variant", "full"),
    ("train.epochs", "100"),
    ("train.lr", "0.001"),
    ("train.clip", "5"),
    ("train.mask_ratio", "0.2"),
    ("train.pattern", "random"),
    ("train.seed", "3407"),
    ("eval.mechanisms", "mcar"),
    ("eval.rates", "0.1"),
    ("eval.seeds", "3407..3411"),
    ("synth.n", "5"),
    ("synth.f", "2"),
    ("synth.t", "500"),
    ("synth.noise", "0.25"),
];
// Keys without defaults, still legal: out.dir and checkpoint.path are
// handled below so the table above stays the single source of typed
// defaults.

/// Reads a config file into raw pairs. Later assignments to the same key
/// win, like flags do.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(format!(
                "config {} line {}: expected `key = value`, found {line:?}",
                path.display(),
                idx + 1
            ));
        };
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("{key}: {e} (found {value:?})")))
}

fn parse_pattern(value: &str) -> Result<TrainingPattern> {
    match value.split_once(':') {
        None if value == "random" => Ok(TrainingPattern::Random),
        None if value == "historical" => Ok(TrainingPattern::Historical),
        Some(("block", len)) => Ok(TrainingPattern::Block {
            block_len: parse_num("train.pattern block length", len)?,
        }),
        _ => err(format!(
            "train.pattern: expected random, historical, or block:<len>, found {value:?}"
        )),
    }
}

fn parse_mechanism(value: &str) -> Result<MaskMechanism> {
    let mut parts = value.split(':');
    let head = parts.next().unwrap_or("");
    let args: Vec<&str> = parts.collect();
    match (head, args.as_slice()) {
        ("mcar", []) => Ok(MaskMechanism::Mcar),
        ("mar", []) => Ok(MaskMechanism::Mar {
            conditioning_feature: 0,
        }),
        ("mar", [feat]) => Ok(MaskMechanism::Mar {
            conditioning_feature: parse_num("eval.mechanisms mar feature", feat)?,
        }),
        ("mnar", []) => Ok(MaskMechanism::default_mnar()),
        ("mnar", [q, hi, lo]) => Ok(MaskMechanism::Mnar {
            quantile: parse_num("eval.mechanisms mnar quantile", q)?,
            weight_high: parse_num("eval.mechanisms mnar weight_high", hi)?,
            weight_low: parse_num("eval.mechanisms mnar weight_low", lo)?,
        }),
        _ => err(format!(
            "eval.mechanisms: expected mcar, mar[:<feature>], or mnar[:<q>:<hi>:<lo>], \
             found {value:?}"
        )),
    }
}

/// Seed lists: `a..b` is the paper's inclusive convention (`3407..3411`
/// names five seeds), otherwise a comma list.
fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    if let Some((lo, hi)) = value.split_once("..") {
        let lo: u64 = parse_num("eval.seeds", lo)?;
        let hi: u64 = parse_num("eval.seeds", hi)?;
        if hi < lo {
            return err(format!("eval.seeds: range {value:?} runs backwards"));
        }
        return Ok((lo..=hi).collect());
    }
    value
        .split(',')
        .map(|s| parse_num("eval.seeds", s.trim()))
        .collect()
}

fn parse_rates(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| parse_num("eval.rates", s.trim()))
        .collect()
}

impl RunConfig {
    /// Applies `overrides` on top of `file` pairs on top of defaults,
    /// then type-checks everything.
    pub fn from_raw(
        file: BTreeMap<String, String>,
        overrides: Vec<(String, String)>,
    ) -> Result<RunConfig> {
        let mut resolved: BTreeMap<String, String> = KEY_DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        resolved.insert("out.dir".into(), "runs".into());
        resolved.insert("checkpoint.path".into(), String::new());
        resolved.insert("synth.seed".into(), String::new());
        for (key, value) in file.into_iter().chain(overrides) {
            if !resolved.contains_key(key.as_str()) {
                return err(format!("unknown config key {key:?}"));
            }
            resolved.insert(key, value);
        }

        let get = |key: &str| resolved.get(key).map(String::as_str).unwrap_or("");
        let dataset = match (get("dataset.name"), get("dataset.path")) {
            ("", "") => None,
            ("dutchwind", "") => Some(DatasetSource::DutchWind),
            ("synth", "") => Some(DatasetSource::Synth),
            ("", path) => {
                let coords = get("adjacency.coords");
                let adjacency = get("adjacency.path");
                if coords.is_empty() == adjacency.is_empty() {
                    return err(
                        "dataset.path needs exactly one of adjacency.coords or adjacency.path",
                    );
                }
                Some(DatasetSource::Csv {
                    data: PathBuf::from(path),
                    coords: (!coords.is_empty()).then(|| PathBuf::from(coords)),
                    adjacency: (!adjacency.is_empty()).then(|| PathBuf::from(adjacency)),
                })
            }
            (name, "") => {
                return err(format!(
                    "dataset.name: expected dutchwind or synth, found {name:?}"
                ))
            }
            _ => return err("dataset.name and dataset.path are mutually exclusive"),
        };

        let haversine = match get("gaussian.metric") {
            "haversine" => true,
            "euclidean" => false,
            other => {
                return err(format!(
                    "gaussian.metric: expected haversine or euclidean, found {other:?}"
                ))
            }
        };

        let train_seed = parse_num("train.seed", get("train.seed"))?;
        let synth_seed = match get("synth.seed") {
            "" => train_seed,
            s => parse_num("synth.seed", s)?,
        };
        let config = RunConfig {
            dataset,
            gaussian_threshold: parse_num("gaussian.threshold", get("gaussian.threshold"))?,
            haversine,
            t_w: parse_num("window.length", get("window.length"))?,
            stride: parse_num("window.stride", get("window.stride"))?,
            c: parse_num("model.c", get("model.c"))?,
            d: parse_num("model.d", get("model.d"))?,
            k: parse_num("model.k", get("model.k"))?,
            l: parse_num("model.l", get("model.l"))?,
            variant: get("model.variant").to_string(),
            epochs: parse_num("train.epochs", get("train.epochs"))?,
            learning_rate: parse_num("train.lr", get("train.lr"))?,
            clip_norm: parse_num("train.clip", get("train.clip"))?,
            mask_ratio: parse_num("train.mask_ratio", get("train.mask_ratio"))?,
            pattern: parse_pattern(get("train.pattern"))?,
            train_seed,
            mechanisms: get("eval.mechanisms")
                .split(',')
                .map(|m| parse_mechanism(m.trim()))
                .collect::<Result<_>>()?,
            rates: parse_rates(get("eval.rates"))?,
            seeds: parse_seeds(get("eval.seeds"))?,
            synth: SynthParams {
                n: parse_num("synth.n", get("synth.n"))?,
                f: parse_num("synth.f", get("synth.f"))?,
                t: parse_num("synth.t", get("synth.t"))?,
                noise: parse_num("synth.noise", get("synth.noise"))?,
                seed: synth_seed,
            },
            out_dir: PathBuf::from(get("out.dir")),
            checkpoint: {
                let p = get("checkpoint.path");
                (!p.is_empty()).then(|| PathBuf::from(p))
            },
            resolved,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        gsli::evaluation::lookup_variant(&self.variant)
            .map_err(|e| ConfigError(format!("model.variant: {e}")))?;
        for (name, v) in [
            ("window.length", self.t_w),
            ("window.stride", self.stride),
            ("model.c", self.c),
            ("model.d", self.d),
            ("model.l", self.l),
            ("train.epochs", self.epochs),
            ("synth.n", self.synth.n),
            ("synth.f", self.synth.f),
            ("synth.t", self.synth.t),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return err(format!(
                "train.mask_ratio must lie in (0, 1), found {}",
                self.mask_ratio
            ));
        }
        for &rate in &self.rates {
            if !(rate > 0.0 && rate < 1.0) {
                return err(format!("eval.rates entries must lie in (0, 1), found {rate}"));
            }
        }
        if self.seeds.is_empty() {
            return err("eval.seeds names no seeds");
        }
        if self.out_dir.as_os_str().is_empty() {
            return err("out.dir must not be empty");
        }
        Ok(())
    }

    /// The dataset source, or a config error for subcommands that need
    /// one.
    pub fn require_dataset(&self) -> Result<&DatasetSource> {
        self.dataset
            .as_ref()
            .ok_or_else(|| ConfigError("no dataset configured: set dataset.name or dataset.path".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| ConfigError("no checkpoint configured: set checkpoint.path".into()))
    }

    /// Model hyperparameters for a dataset of the given width.
    pub fn model_config(&self, n: usize, f: usize) -> ModelConfig {
        let variant = gsli::evaluation::lookup_variant(&self.variant)
            .unwrap_or(VariantSpec::FULL);
        ModelConfig {
            n,
            f,
            c: self.c,
            d: self.d,
            k: self.k,
            l: self.l,
            t_w: self.t_w,
            variant,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            mask_ratio: self.mask_ratio,
            pattern: self.pattern.clone(),
            stride: self.stride,
            seed: self.train_seed,
        }
    }
}
