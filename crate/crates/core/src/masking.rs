//! Evaluation splits and training label masks.
//!
//! Both layers of masking work on observed cells only and keep exact counts:
//! an evaluation split hides `floor(rate * observed)` cells from the model,
//! and a training split relabels part of a window's visible cells as
//! reconstruction targets. All sampling is driven by a ChaCha stream seeded
//! from the caller, so identical seeds reproduce identical masks on any
//! platform.

use ndarray::{Array3, ArrayView3};
use rand::seq::index::sample as uniform_sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::SpatioTemporalDataset;
use crate::error::{Error, Result};

/// Missingness mechanism for carving an evaluation split out of the
/// observed cells.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum MaskMechanism {
    /// Uniform over all observed cells.
    Mcar,
    /// Cell weights follow the per-timestamp rank of one conditioning
    /// feature's node-averaged value: timestamps where that feature runs high
    /// lose more cells (across all features).
    Mar { conditioning_feature: usize },
    /// Self-masking: cells whose value exceeds their feature's `quantile`
    /// get `weight_high`, the rest `weight_low`.
    Mnar {
        quantile: f64,
        weight_high: f64,
        weight_low: f64,
    },
}

impl MaskMechanism {
    /// The self-masking configuration reported in the evaluation protocol:
    /// 0.9-quantile threshold with 4:1 odds.
    pub fn default_mnar() -> Self {
        MaskMechanism::Mnar {
            quantile: 0.9,
            weight_high: 4.0,
            weight_low: 1.0,
        }
    }
}

/// Pattern for simulated missingness during training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum TrainingPattern {
    /// Uniform cells.
    Random,
    /// Contiguous temporal runs of `block_len` within single
    /// (station, feature) series.
    Block { block_len: usize },
    /// Per timestamp: with probability one half reuse the previous
    /// timestamp's label positions, otherwise draw fresh ones.
    Historical,
}

/// Cells held out for scoring (`eval_mask`) and the reduced observation mask
/// the model is allowed to see (`corrupted_mask`). The two partition the
/// original observed set.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub eval_mask: Array3<bool>,
    pub corrupted_mask: Array3<bool>,
}

/// Within-window split of visible cells into model input and reconstruction
/// labels. `input_mask` and `label_mask` are disjoint and their union is the
/// window's observed set.
#[derive(Debug, Clone)]
pub struct TrainingSplit {
    pub input_mask: Array3<bool>,
    pub label_mask: Array3<bool>,
}

fn exact_count(rate: f64, observed: usize, context: &str) -> Result<usize> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::parameter(
            "rate",
            format!("{rate} outside (0, 1) in {context}"),
        ));
    }
    let k = (rate * observed as f64).floor() as usize;
    if k == 0 {
        return Err(Error::numeric(
            context,
            format!("rate {rate} of {observed} observed cells selects nothing"),
        ));
    }
    Ok(k)
}

/// Weighted sampling without replacement (largest `u^(1/w)` keys). Zero
/// weights are only drawn when positive-weight mass runs out, which is an
/// error.
fn weighted_sample_without_replacement(
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < k {
        return Err(Error::parameter(
            "rate",
            format!("{k} cells requested but only {positive} carry positive weight"),
        ));
    }
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let key = if w > 0.0 {
                rng.random::<f64>().powf(1.0 / w)
            } else {
                let _ = rng.random::<f64>(); // keep the stream aligned
                -1.0
            };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(keyed[..k].iter().map(|&(_, i)| i).collect())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Hides `floor(rate * observed)` observed cells under the chosen mechanism.
pub fn apply_mechanism(
    dataset: &SpatioTemporalDataset,
    mechanism: &MaskMechanism,
    rate: f64,
    seed: u64,
) -> Result<EvalSplit> {
    let (n, t, f) = (dataset.n(), dataset.t(), dataset.f());
    let observed: Vec<(usize, usize, usize)> = dataset
        .mask
        .indexed_iter()
        .filter_map(|((i, s, j), &m)| m.then_some((i, s, j)))
        .collect();
    let k = exact_count(rate, observed.len(), "apply_mechanism")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let chosen: Vec<usize> = match mechanism {
        MaskMechanism::Mcar => uniform_sample(&mut rng, observed.len(), k).into_vec(),
        MaskMechanism::Mar {
            conditioning_feature,
        } => {
            if *conditioning_feature >= f {
                return Err(Error::parameter(
                    "conditioning_feature",
                    format!("index {conditioning_feature} out of range for {f} features"),
                ));
            }
            // node-averaged conditioning value per timestamp, over observed
            // entries; timestamps with none get a neutral middle rank
            let mut avg = vec![f64::NAN; t];
            for s in 0..t {
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for i in 0..n {
                    if dataset.mask[[i, s, *conditioning_feature]] {
                        sum += dataset.values[[i, s, *conditioning_feature]];
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    avg[s] = sum / cnt as f64;
                }
            }
            let known: Vec<f64> = avg.iter().cloned().filter(|v| v.is_finite()).collect();
            let ranks_known = average_ranks(&known);
            let neutral = (known.len() as f64 + 1.0) / 2.0;
            let mut rank_of_t = vec![neutral; t];
            let mut cursor = 0;
            for s in 0..t {
                if avg[s].is_finite() {
                    rank_of_t[s] = ranks_known[cursor];
                    cursor += 1;
                }
            }
            let weights: Vec<f64> = observed.iter().map(|&(_, s, _)| rank_of_t[s]).collect();
            weighted_sample_without_replacement(&weights, k, &mut rng)?
        }
        MaskMechanism::Mnar {
            quantile,
            weight_high,
            weight_low,
        } => {
            if !(0.0..1.0).contains(quantile) {
                return Err(Error::parameter(
                    "quantile",
                    format!("{quantile} outside [0, 1)"),
                ));
            }
            if *weight_high <= 0.0 || *weight_low < 0.0 {
                return Err(Error::parameter(
                    "mnar weights",
                    format!("high {weight_high} must be positive, low {weight_low} non-negative"),
                ));
            }
            // per-feature threshold: smallest observed value with at least
            // ceil(q * count) observed values at or below it
            let mut thresholds = vec![f64::INFINITY; f];
            for feat in 0..f {
                let mut vals: Vec<f64> = observed
                    .iter()
                    .filter(|&&(_, _, j)| j == feat)
                    .map(|&(i, s, j)| dataset.values[[i, s, j]])
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let idx = ((quantile * vals.len() as f64).ceil() as usize).max(1) - 1;
                thresholds[feat] = vals[idx.min(vals.len() - 1)];
            }
            let weights: Vec<f64> = observed
                .iter()
                .map(|&(i, s, j)| {
                    if dataset.values[[i, s, j]] > thresholds[j] {
                        *weight_high
                    } else {
                        *weight_low
                    }
                })
                .collect();
            weighted_sample_without_replacement(&weights, k, &mut rng)?
        }
    };

    let mut eval_mask = Array3::from_elem((n, t, f), false);
    for idx in chosen {
        let (i, s, j) = observed[idx];
        eval_mask[[i, s, j]] = true;
    }
    let mut corrupted_mask = dataset.mask.clone();
    for ((i, s, j), &e) in eval_mask.indexed_iter() {
        if e {
            corrupted_mask[[i, s, j]] = false;
        }
    }
    Ok(EvalSplit {
        eval_mask,
        corrupted_mask,
    })
}

/// Splits a window's visible cells into model input and training labels.
///
/// The label set covers about `ratio` of the window's observed cells: exactly
/// for [`TrainingPattern::Random`], within one block's overshoot for
/// [`TrainingPattern::Block`], and per-timestamp rounded for
/// [`TrainingPattern::Historical`].
pub fn sample_training_mask(
    observed: ArrayView3<'_, bool>,
    ratio: f64,
    pattern: TrainingPattern,
    seed: u64,
) -> Result<TrainingSplit> {
    let shape = observed.shape();
    let (n, t_w, f) = (shape[0], shape[1], shape[2]);
    let cells: Vec<(usize, usize, usize)> = observed
        .indexed_iter()
        .filter_map(|((i, s, j), &m)| m.then_some((i, s, j)))
        .collect();
    if cells.is_empty() {
        return Err(Error::numeric(
            "sample_training_mask",
            "window has no observed cells",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = Array3::from_elem((n, t_w, f), false);

    match pattern {
        TrainingPattern::Random => {
            let k = exact_count(ratio, cells.len(), "sample_training_mask")?;
            for idx in uniform_sample(&mut rng, cells.len(), k) {
                let (i, s, j) = cells[idx];
                label[[i, s, j]] = true;
            }
        }
        TrainingPattern::Block { block_len } => {
            if block_len == 0 || block_len > t_w {
                return Err(Error::parameter(
                    "block_len",
                    format!("{block_len} outside [1, {t_w}]"),
                ));
            }
            let k = exact_count(ratio, cells.len(), "sample_training_mask")?;
            let mut count = 0usize;
            let mut attempts = 0usize;
            let attempt_cap = 200 + 40 * (k / block_len + 1);
            while count < k && attempts < attempt_cap {
                attempts += 1;
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..f);
                let start = rng.random_range(0..=t_w - block_len);
                for s in start..start + block_len {
                    if observed[[i, s, j]] && !label[[i, s, j]] {
                        label[[i, s, j]] = true;
                        count += 1;
                    }
                }
            }
            // runs that kept landing on already-labelled cells: top up
            // uniformly so the target is still met
            if count < k {
                let free: Vec<&(usize, usize, usize)> = cells
                    .iter()
                    .filter(|&&(i, s, j)| !label[[i, s, j]])
                    .collect();
                for idx in uniform_sample(&mut rng, free.len(), k - count) {
                    let &(i, s, j) = free[idx];
                    label[[i, s, j]] = true;
                }
            }
        }
        TrainingPattern::Historical => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::parameter(
                    "ratio",
                    format!("{ratio} outside (0, 1)"),
                ));
            }
            for s in 0..t_w {
                let copy = s > 0 && rng.random::<bool>();
                if copy {
                    for i in 0..n {
                        for j in 0..f {
                            label[[i, s, j]] = label[[i, s - 1, j]] && observed[[i, s, j]];
                        }
                    }
                } else {
                    let here: Vec<(usize, usize)> = (0..n)
                        .flat_map(|i| (0..f).map(move |j| (i, j)))
                        .filter(|&(i, j)| observed[[i, s, j]])
                        .collect();
                    let want = (ratio * here.len() as f64).round() as usize;
                    if want > 0 {
                        for idx in uniform_sample(&mut rng, here.len(), want) {
                            let (i, j) = here[idx];
                            label[[i, s, j]] = true;
                        }
                    }
                }
            }
            if label.iter().filter(|&&b| b).count() == 0 {
                return Err(Error::numeric(
                    "sample_training_mask",
                    "historical pattern produced an empty label set",
                ));
            }
        }
    }

    let mut input = observed.to_owned();
    for ((i, s, j), &l) in label.indexed_iter() {
        if l {
            input[[i, s, j]] = false;
        }
    }
    Ok(TrainingSplit {
        input_mask: input,
        label_mask: label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::SpatioTemporalDataset;
    use ndarray::{Array2, Array3};

    fn full_dataset(n: usize, t: usize, f: usize) -> SpatioTemporalDataset {
        let mut values = Array3::zeros((n, t, f));
        for ((i, s, j), v) in values.indexed_iter_mut() {
            *v = (i * 100 + s * 3 + j) as f64;
        }
        SpatioTemporalDataset {
            values,
            mask: Array3::from_elem((n, t, f), true),
            node_ids: (0..n).map(|i| format!("n{i}")).collect(),
            feature_ids: (0..f).map(|j| format!("f{j}")).collect(),
            timestamps: (0..t as i64).collect(),
            adjacency: Array2::zeros((n, n)),
        }
    }

    fn count(mask: &Array3<bool>) -> usize {
        mask.iter().filter(|&&b| b).count()
    }

    #[test]
    fn mcar_hides_exact_count_and_partitions_observed() {
        let ds = full_dataset(10, 10, 10);
        let split = apply_mechanism(&ds, &MaskMechanism::Mcar, 0.1, 7).unwrap();
        assert_eq!(count(&split.eval_mask), 100);
        for ((idx, &e), &c) in split
            .eval_mask
            .indexed_iter()
            .zip(split.corrupted_mask.iter())
        {
            assert!(!(e && c), "cell {idx:?} in both masks");
            assert_eq!(e || c, ds.mask[idx], "union must equal observed");
        }
    }

    #[test]
    fn mcar_is_seed_deterministic() {
        let ds = full_dataset(6, 20, 3);
        let a = apply_mechanism(&ds, &MaskMechanism::Mcar, 0.2, 42).unwrap();
        let b = apply_mechanism(&ds, &MaskMechanism::Mcar, 0.2, 42).unwrap();
        assert_eq!(a.eval_mask, b.eval_mask);
        let c = apply_mechanism(&ds, &MaskMechanism::Mcar, 0.2, 43).unwrap();
        assert_ne!(a.eval_mask, c.eval_mask);
    }

    #[test]
    fn mcar_never_selects_missing_cells() {
        let mut ds = full_dataset(4, 25, 2);
        for s in 0..25 {
            ds.mask[[1, s, 0]] = false;
        }
        let split = apply_mechanism(&ds, &MaskMechanism::Mcar, 0.3, 3).unwrap();
        for s in 0..25 {
            assert!(!split.eval_mask[[1, s, 0]]);
        }
    }

    #[test]
    fn tiny_rate_fails_instead_of_hiding_nothing() {
        let ds = full_dataset(2, 5, 1);
        assert!(apply_mechanism(&ds, &MaskMechanism::Mcar, 0.05, 1).is_err());
        assert!(apply_mechanism(&ds, &MaskMechanism::Mcar, 1.5, 1).is_err());
    }

    #[test]
    fn mar_shifts_mass_toward_high_conditioning_timestamps() {
        // conditioning feature rises linearly with time, so the second half
        // of the series must lose clearly more cells than the first
        let mut ds = full_dataset(1, 200, 2);
        for s in 0..200 {
            ds.values[[0, s, 0]] = s as f64;
        }
        let split = apply_mechanism(
            &ds,
            &MaskMechanism::Mar {
                conditioning_feature: 0,
            },
            0.25,
            11,
        )
        .unwrap();
        let (mut early, mut late) = (0, 0);
        for ((_, s, _), &e) in split.eval_mask.indexed_iter() {
            if e {
                if s < 100 {
                    early += 1;
                } else {
                    late += 1;
                }
            }
        }
        assert_eq!(early + late, 100);
        assert!(late > early + 20, "late {late} vs early {early}");
    }

    #[test]
    fn mar_with_constant_conditioning_still_hits_exact_count() {
        let mut ds = full_dataset(3, 50, 2);
        for s in 0..50 {
            for i in 0..3 {
                ds.values[[i, s, 0]] = 1.0;
            }
        }
        let split = apply_mechanism(
            &ds,
            &MaskMechanism::Mar {
                conditioning_feature: 0,
            },
            0.2,
            5,
        )
        .unwrap();
        assert_eq!(count(&split.eval_mask), 60);
    }

    #[test]
    fn mar_rejects_unknown_conditioning_feature() {
        let ds = full_dataset(2, 10, 2);
        assert!(apply_mechanism(
            &ds,
            &MaskMechanism::Mar {
                conditioning_feature: 5
            },
            0.2,
            1
        )
        .is_err());
    }

    #[test]
    fn mnar_with_zero_low_weight_takes_exactly_the_top_decile() {
        let mut ds = full_dataset(1, 100, 1);
        for s in 0..100 {
            ds.values[[0, s, 0]] = (s + 1) as f64;
        }
        let split = apply_mechanism(
            &ds,
            &MaskMechanism::Mnar {
                quantile: 0.9,
                weight_high: 1.0,
                weight_low: 0.0,
            },
            0.1,
            9,
        )
        .unwrap();
        for s in 0..100 {
            assert_eq!(split.eval_mask[[0, s, 0]], s >= 90, "timestamp {s}");
        }
    }

    #[test]
    fn mnar_rate_beyond_high_mass_with_zero_low_weight_fails() {
        let mut ds = full_dataset(1, 100, 1);
        for s in 0..100 {
            ds.values[[0, s, 0]] = (s + 1) as f64;
        }
        assert!(apply_mechanism(
            &ds,
            &MaskMechanism::Mnar {
                quantile: 0.9,
                weight_high: 1.0,
                weight_low: 0.0,
            },
            0.5,
            9
        )
        .is_err());
    }

    #[test]
    fn mnar_on_constant_feature_degenerates_to_uniform() {
        let mut ds = full_dataset(2, 40, 1);
        ds.values.fill(3.0);
        let split = apply_mechanism(&ds, &MaskMechanism::default_mnar(), 0.25, 2).unwrap();
        assert_eq!(count(&split.eval_mask), 20);
    }

    #[test]
    fn random_training_split_is_exact_and_disjoint() {
        let observed = Array3::from_elem((5, 10, 2), true);
        let split =
            sample_training_mask(observed.view(), 0.2, TrainingPattern::Random, 1).unwrap();
        assert_eq!(count(&split.label_mask), 20);
        assert_eq!(count(&split.input_mask), 80);
        for (&i, &l) in split.input_mask.iter().zip(split.label_mask.iter()) {
            assert!(!(i && l));
        }
    }

    #[test]
    fn block_training_split_masks_one_contiguous_run() {
        // single fully observed series of 20 steps, ratio 0.2, block_len 4:
        // the first block satisfies the target exactly
        let observed = Array3::from_elem((1, 20, 1), true);
        let split = sample_training_mask(
            observed.view(),
            0.2,
            TrainingPattern::Block { block_len: 4 },
            8,
        )
        .unwrap();
        let labels: Vec<usize> = split
            .label_mask
            .indexed_iter()
            .filter_map(|((_, s, _), &l)| l.then_some(s))
            .collect();
        assert_eq!(labels.len(), 4);
        for w in labels.windows(2) {
            assert_eq!(w[1], w[0] + 1, "labels {labels:?} are not contiguous");
        }
    }

    #[test]
    fn historical_training_split_copies_about_half_the_steps() {
        let observed = Array3::from_elem((10, 10_000, 1), true);
        let split =
            sample_training_mask(observed.view(), 0.3, TrainingPattern::Historical, 21).unwrap();
        let t = 10_000;
        let mut copies = 0usize;
        for s in 1..t {
            let same = (0..10).all(|i| split.label_mask[[i, s, 0]] == split.label_mask[[i, s - 1, 0]]);
            if same {
                copies += 1;
            }
        }
        let rate = copies as f64 / (t - 1) as f64;
        assert!((rate - 0.5).abs() < 0.05, "copy rate {rate}");
        // overall coverage tracks the ratio
        let frac = count(&split.label_mask) as f64 / (10.0 * t as f64);
        assert!((frac - 0.3).abs() < 0.02, "label fraction {frac}");
    }

    #[test]
    fn training_split_requires_observed_cells_and_sane_ratio() {
        let empty = Array3::from_elem((2, 5, 1), false);
        assert!(sample_training_mask(empty.view(), 0.2, TrainingPattern::Random, 1).is_err());
        let observed = Array3::from_elem((1, 4, 1), true);
        assert!(sample_training_mask(observed.view(), 0.1, TrainingPattern::Random, 1).is_err());
    }
}
