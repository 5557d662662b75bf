//! Datasets, adjacency construction, normalization, and windowing.
//!
//! A [`SpatioTemporalDataset`] is a dense `[N, T, F]` value tensor with a
//! parallel observation mask: `mask[i, t, f]` is true where a real
//! measurement exists. Values at unobserved cells are meaningless and are
//! forced to zero by [`normalize`].

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Distance metric for station coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GeoMetric {
    /// Great-circle distance in kilometres from (latitude, longitude) pairs.
    Haversine,
    /// Euclidean distance on planar (x, y) coordinates.
    Euclidean,
}

/// Column names for long-form measurement CSV files.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LoadSchema {
    pub node_col: String,
    pub time_col: String,
    pub feature_col: String,
    pub value_col: String,
}

impl Default for LoadSchema {
    fn default() -> Self {
        LoadSchema {
            node_col: "node_id".into(),
            time_col: "timestamp".into(),
            feature_col: "feature_id".into(),
            value_col: "value".into(),
        }
    }
}

/// Dense spatial-temporal panel with observation mask and station graph.
#[derive(Debug, Clone)]
pub struct SpatioTemporalDataset {
    /// `[N, T, F]` measurements; undefined where `mask` is false.
    pub values: Array3<f64>,
    /// `[N, T, F]` observation indicators.
    pub mask: Array3<bool>,
    /// Station identifiers, index-aligned with the node axis.
    pub node_ids: Vec<String>,
    /// Feature identifiers, index-aligned with the feature axis.
    pub feature_ids: Vec<String>,
    /// Timestamps of the regular grid, ascending.
    pub timestamps: Vec<i64>,
    /// `[N, N]` non-negative station adjacency, zero diagonal.
    pub adjacency: Array2<f64>,
}

impl SpatioTemporalDataset {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn t(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn f(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.mask.len() as f64
    }

    /// Checks the structural invariants shared by every constructor.
    pub fn validate(&self) -> Result<()> {
        let (n, t, f) = (self.n(), self.t(), self.f());
        if self.mask.shape() != self.values.shape() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "mask shape {:?} vs values shape {:?}",
                    self.mask.shape(),
                    self.values.shape()
                ),
            ));
        }
        if self.node_ids.len() != n || self.feature_ids.len() != f || self.timestamps.len() != t {
            return Err(Error::Inconsistent(format!(
                "axis labels ({}, {}, {}) do not match tensor shape ({n}, {t}, {f})",
                self.node_ids.len(),
                self.timestamps.len(),
                self.feature_ids.len()
            )));
        }
        if self.adjacency.shape() != [n, n] {
            return Err(Error::shape(
                "dataset",
                format!("adjacency shape {:?} for {n} nodes", self.adjacency.shape()),
            ));
        }
        for (i, v) in self.adjacency.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::numeric(
                    "dataset",
                    format!("adjacency entry {i} is {v}; must be finite and non-negative"),
                ));
            }
        }
        for i in 0..n {
            if self.adjacency[[i, i]] != 0.0 {
                return Err(Error::Inconsistent(format!(
                    "adjacency diagonal must be zero, node {i} has {}",
                    self.adjacency[[i, i]]
                )));
            }
        }
        for ((idx, &m), &v) in self.mask.indexed_iter().zip(self.values.iter()) {
            if m && !v.is_finite() {
                return Err(Error::numeric(
                    "dataset",
                    format!("observed cell {idx:?} holds non-finite value {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-feature normalization statistics (mean and population stdev over
/// observed entries).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Out- and in-degree vectors of a station adjacency.
#[derive(Debug, Clone)]
pub struct DegreePair {
    /// Row sums of the adjacency.
    pub out_deg: Array1<f64>,
    /// Column sums of the adjacency.
    pub in_deg: Array1<f64>,
}

/// Degree-normalized transition matrices for diffusion: forward is
/// `D_out^-1 A`, backward is `D_in^-1 A^T`. Rows with zero degree become
/// zero rows rather than dividing by zero.
#[derive(Debug, Clone)]
pub struct Transitions {
    pub forward: Array2<f64>,
    pub backward: Array2<f64>,
}

/// Half-open time range `[start, start + len)` of one training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    const EARTH_RADIUS_KM: f64 = 6371.0;
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}

/// Pairwise station distance under the chosen metric.
pub fn station_distance(metric: GeoMetric, a: (f64, f64), b: (f64, f64)) -> f64 {
    match metric {
        GeoMetric::Haversine => haversine_km(a, b),
        GeoMetric::Euclidean => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
    }
}

/// Builds the thresholded Gaussian kernel adjacency over station coordinates.
///
/// `W[i, j] = exp(-dist(i, j)^2 / sigma^2)` with `sigma^2` the mean squared
/// pairwise distance over distinct station pairs; entries below `threshold`
/// and the diagonal are zeroed. Note the two-station consequence: the kernel
/// scale equals the single distance, so the off-diagonal weight is exactly
/// `exp(-1)` before thresholding.
pub fn build_gaussian_adjacency(
    coords: &[(f64, f64)],
    metric: GeoMetric,
    threshold: f64,
) -> Result<Array2<f64>> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "gaussian adjacency needs at least 2 stations, got {n}"
        )));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::parameter(
            "threshold",
            format!("{threshold} outside [0, 1)"),
        ));
    }
    if metric == GeoMetric::Haversine {
        for (i, &(lat, lon)) in coords.iter().enumerate() {
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(Error::parameter(
                    "coords",
                    format!("station {i} has invalid latitude/longitude ({lat}, {lon})"),
                ));
            }
        }
    }

    let mut dist = Array2::<f64>::zeros((n, n));
    let mut sq_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = station_distance(metric, coords[i], coords[j]);
            dist[[i, j]] = d;
            dist[[j, i]] = d;
            sq_sum += d * d;
            pairs += 1;
        }
    }
    let sigma_sq = sq_sum / pairs as f64;
    if sigma_sq == 0.0 {
        return Err(Error::Degenerate(
            "all stations are co-located; kernel scale is zero".into(),
        ));
    }

    let mut adj = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = (-dist[[i, j]].powi(2) / sigma_sq).exp();
            adj[[i, j]] = if w < threshold { 0.0 } else { w };
        }
    }
    Ok(adj)
}

/// Out-/in-degrees of an adjacency.
pub fn degrees(adjacency: &Array2<f64>) -> DegreePair {
    DegreePair {
        out_deg: adjacency.sum_axis(Axis(1)),
        in_deg: adjacency.sum_axis(Axis(0)),
    }
}

/// Degree-normalized diffusion transitions; zero-degree rows stay zero.
pub fn transitions(adjacency: &Array2<f64>) -> Transitions {
    let n = adjacency.nrows();
    let deg = degrees(adjacency);
    let mut forward = Array2::<f64>::zeros((n, n));
    let mut backward = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        if deg.out_deg[i] > 0.0 {
            for j in 0..n {
                forward[[i, j]] = adjacency[[i, j]] / deg.out_deg[i];
            }
        }
        if deg.in_deg[i] > 0.0 {
            for j in 0..n {
                backward[[i, j]] = adjacency[[j, i]] / deg.in_deg[i];
            }
        }
    }
    Transitions { forward, backward }
}

/// Z-scores every feature over its observed entries (population stdev) and
/// zeroes unobserved cells. Errors on features with no observations or zero
/// variance.
pub fn normalize(dataset: &SpatioTemporalDataset) -> Result<(SpatioTemporalDataset, NormStats)> {
    let (n, t, f) = (dataset.n(), dataset.t(), dataset.f());
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for feat in 0..f {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for s in 0..t {
                if dataset.mask[[i, s, feat]] {
                    sum += dataset.values[[i, s, feat]];
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::Degenerate(format!(
                "feature '{}' has no observed entries",
                dataset.feature_ids[feat]
            )));
        }
        let mu = sum / count as f64;
        let mut var = 0.0;
        for i in 0..n {
            for s in 0..t {
                if dataset.mask[[i, s, feat]] {
                    var += (dataset.values[[i, s, feat]] - mu).powi(2);
                }
            }
        }
        let sigma = (var / count as f64).sqrt();
        if sigma == 0.0 {
            return Err(Error::Degenerate(format!(
                "feature '{}' has zero variance over observed entries",
                dataset.feature_ids[feat]
            )));
        }
        mean[feat] = mu;
        std[feat] = sigma;
    }

    let stats = NormStats { mean, std };
    let mut out = dataset.clone();
    out.values = apply_norm_stats(&dataset.values, &dataset.mask, &stats)?;
    Ok((out, stats))
}

/// Z-scores a value tensor with previously computed statistics: observed
/// cells become `(v - mean) / std`, unobserved cells become 0.
pub fn apply_norm_stats(
    values: &Array3<f64>,
    mask: &Array3<bool>,
    stats: &NormStats,
) -> Result<Array3<f64>> {
    let f = values.shape()[2];
    if stats.mean.len() != f || stats.std.len() != f {
        return Err(Error::shape(
            "apply_norm_stats",
            format!("stats cover {} features, tensor has {f}", stats.mean.len()),
        ));
    }
    if values.shape() != mask.shape() {
        return Err(Error::shape(
            "apply_norm_stats",
            format!(
                "value shape {:?} vs mask shape {:?}",
                values.shape(),
                mask.shape()
            ),
        ));
    }
    Ok(Array3::from_shape_fn(values.raw_dim(), |(i, s, feat)| {
        if mask[[i, s, feat]] {
            (values[[i, s, feat]] - stats.mean[feat]) / stats.std[feat]
        } else {
            0.0
        }
    }))
}

/// Inverts [`normalize`] on a value tensor.
pub fn denormalize(values: &Array3<f64>, stats: &NormStats) -> Result<Array3<f64>> {
    let f = values.shape()[2];
    if stats.mean.len() != f || stats.std.len() != f {
        return Err(Error::shape(
            "denormalize",
            format!(
                "stats cover {} features, tensor has {f}",
                stats.mean.len()
            ),
        ));
    }
    let mut out = values.clone();
    for feat in 0..f {
        let (mu, sigma) = (stats.mean[feat], stats.std[feat]);
        out.index_axis_mut(Axis(2), feat).mapv_inplace(|v| v * sigma + mu);
    }
    Ok(out)
}

/// Splits a series of length `t` into fixed-length windows with the given
/// stride. Windows never extend past the series end; a trailing remainder
/// shorter than `t_w` is not returned.
pub fn window_split(t: usize, t_w: usize, stride: usize) -> Result<Vec<Window>> {
    if t_w == 0 || stride == 0 {
        return Err(Error::parameter(
            "window",
            format!("length {t_w} and stride {stride} must be positive"),
        ));
    }
    if t_w > t {
        return Err(Error::Inconsistent(format!(
            "window length {t_w} exceeds series length {t}"
        )));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + t_w <= t {
        windows.push(Window { start, len: t_w });
        start += stride;
    }
    Ok(windows)
}

fn parse_timestamp(raw: &str, path: &str, row: usize) -> Result<i64> {
    raw.trim().parse::<i64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        row,
        message: format!("timestamp '{raw}' is not an integer"),
    })
}

/// Reads station coordinates from a CSV with columns `node_id,lat,lon` (or
/// `node_id,x,y` for planar data). Node order follows file order.
pub fn load_coordinates(path: &Path) -> Result<(Vec<String>, Vec<(f64, f64)>)> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: display.clone(),
            row: 0,
            message: e.to_string(),
        })?;
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, after header
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            row,
            message: e.to_string(),
        })?;
        if record.len() < 3 {
            return Err(Error::Parse {
                path: display.clone(),
                row,
                message: format!("expected 3 columns, got {}", record.len()),
            });
        }
        let id = record[0].trim().to_string();
        if ids.contains(&id) {
            return Err(Error::Inconsistent(format!(
                "duplicate node id '{id}' in {display}"
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: display.clone(),
                row,
                message: format!("{what} '{s}' is not a number"),
            })
        };
        let a = parse(&record[1], "coordinate")?;
        let b = parse(&record[2], "coordinate")?;
        ids.push(id);
        coords.push((a, b));
    }
    if ids.is_empty() {
        return Err(Error::Inconsistent(format!("{display} lists no stations")));
    }
    Ok((ids, coords))
}

/// Loads a long-form measurement CSV against a prebuilt adjacency.
///
/// Every `(node, timestamp, feature)` combination may appear at most once;
/// rows with an empty or NaN value field mark the cell as missing, as do
/// combinations absent from the file. Timestamps must form a regular grid.
pub fn load_dataset(
    data_path: &Path,
    node_ids: Vec<String>,
    adjacency: Array2<f64>,
    schema: &LoadSchema,
) -> Result<SpatioTemporalDataset> {
    let display = data_path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(data_path)
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                path: display.clone(),
                row: 1,
                message: format!("missing column '{name}'"),
            })
    };
    let (node_c, time_c, feat_c, val_c) = (
        col(&schema.node_col)?,
        col(&schema.time_col)?,
        col(&schema.feature_col)?,
        col(&schema.value_col)?,
    );

    struct RawCell {
        node: usize,
        time: i64,
        feature: String,
        value: Option<f64>,
        row: usize,
    }

    let mut cells: Vec<RawCell> = Vec::new();
    let mut times = BTreeSet::new();
    let mut feature_names = BTreeSet::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2;
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            row,
            message: e.to_string(),
        })?;
        let node_raw = record.get(node_c).unwrap_or("").trim().to_string();
        let node = node_ids
            .iter()
            .position(|id| *id == node_raw)
            .ok_or_else(|| {
                Error::Inconsistent(format!(
                    "node '{node_raw}' at {display}:{row} is not in the station list"
                ))
            })?;
        let time = parse_timestamp(record.get(time_c).unwrap_or(""), &display, row)?;
        let feature = record.get(feat_c).unwrap_or("").trim().to_string();
        if feature.is_empty() {
            return Err(Error::Parse {
                path: display.clone(),
                row,
                message: "empty feature id".into(),
            });
        }
        let raw_val = record.get(val_c).unwrap_or("").trim();
        let value = if raw_val.is_empty() || raw_val.eq_ignore_ascii_case("nan") {
            None
        } else {
            let v = raw_val.parse::<f64>().map_err(|_| Error::Parse {
                path: display.clone(),
                row,
                message: format!("value '{raw_val}' is not a number"),
            })?;
            if v.is_finite() {
                Some(v)
            } else {
                None
            }
        };
        times.insert(time);
        feature_names.insert(feature.clone());
        cells.push(RawCell {
            node,
            time,
            feature,
            value,
            row,
        });
    }

    if cells.is_empty() {
        return Err(Error::Inconsistent(format!("{display} holds no records")));
    }

    let timestamps: Vec<i64> = times.into_iter().collect();
    if timestamps.len() > 1 {
        let step = timestamps[1] - timestamps[0];
        if step <= 0 {
            return Err(Error::Inconsistent("timestamps are not increasing".into()));
        }
        for w in timestamps.windows(2) {
            if w[1] - w[0] != step {
                return Err(Error::Inconsistent(format!(
                    "irregular timestamp grid: step {} after step {step}",
                    w[1] - w[0]
                )));
            }
        }
    }
    let feature_ids: Vec<String> = feature_names.into_iter().collect();

    let (n, t, f) = (node_ids.len(), timestamps.len(), feature_ids.len());
    let mut values = Array3::<f64>::zeros((n, t, f));
    let mut mask = Array3::<bool>::from_elem((n, t, f), false);
    let mut seen = Array3::<bool>::from_elem((n, t, f), false);
    let t0 = timestamps[0];
    let step = grid_step(&timestamps);
    for cell in cells {
        let ti = if t == 1 {
            0
        } else {
            ((cell.time - t0) / step) as usize
        };
        let fi = feature_ids
            .iter()
            .position(|x| *x == cell.feature)
            .expect("feature collected above");
        if seen[[cell.node, ti, fi]] {
            return Err(Error::Inconsistent(format!(
                "duplicate cell (node {}, time {}, feature {}) at {display}:{}",
                node_ids[cell.node], cell.time, cell.feature, cell.row
            )));
        }
        seen[[cell.node, ti, fi]] = true;
        if let Some(v) = cell.value {
            values[[cell.node, ti, fi]] = v;
            mask[[cell.node, ti, fi]] = true;
        }
    }

    let dataset = SpatioTemporalDataset {
        values,
        mask,
        node_ids,
        feature_ids,
        timestamps,
        adjacency,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn grid_step(timestamps: &[i64]) -> i64 {
    if timestamps.len() > 1 {
        timestamps[1] - timestamps[0]
    } else {
        1
    }
}

/// Writes a dataset back to long-form CSV (missing cells get empty value
/// fields) plus the station coordinates are not round-tripped; callers keep
/// those separately.
pub fn save_dataset_csv(dataset: &SpatioTemporalDataset, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::io(display.clone(), std::io::Error::other(e))
    })?;
    writer
        .write_record(["node_id", "timestamp", "feature_id", "value"])
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    for (i, node) in dataset.node_ids.iter().enumerate() {
        for (s, ts) in dataset.timestamps.iter().enumerate() {
            for (f, feat) in dataset.feature_ids.iter().enumerate() {
                let val = if dataset.mask[[i, s, f]] {
                    format!("{}", dataset.values[[i, s, f]])
                } else {
                    String::new()
                };
                writer
                    .write_record([node.as_str(), &ts.to_string(), feat.as_str(), &val])
                    .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
            }
        }
    }
    writer
        .flush()
        .map_err(|e| Error::io(display, e))?;
    Ok(())
}

/// Writes a dense adjacency CSV: header row of node ids, one labelled row of
/// weights per station.
pub fn save_adjacency_csv(
    adjacency: &Array2<f64>,
    node_ids: &[String],
    path: &Path,
) -> Result<()> {
    let display = path.display().to_string();
    if adjacency.nrows() != node_ids.len() {
        return Err(Error::shape(
            "save_adjacency_csv",
            format!(
                "{} node ids for {} adjacency rows",
                node_ids.len(),
                adjacency.nrows()
            ),
        ));
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    let mut header = vec!["node_id".to_string()];
    header.extend(node_ids.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    for (i, node) in node_ids.iter().enumerate() {
        let mut record = vec![node.clone()];
        for j in 0..adjacency.ncols() {
            record.push(format!("{}", adjacency[[i, j]]));
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::io(display.clone(), std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(display, e))?;
    Ok(())
}

/// Reads a dense adjacency CSV as written by [`save_adjacency_csv`]: a
/// header row naming the stations, then one labelled row of weights per
/// station, in the same order as the header.
pub fn load_adjacency_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: display.clone(),
            row: 0,
            message: e.to_string(),
        })?;
    let node_ids: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .skip(1)
        .map(str::to_string)
        .collect();
    let n = node_ids.len();
    if n == 0 {
        return Err(Error::Parse {
            path: display,
            row: 0,
            message: "adjacency header names no stations".into(),
        });
    }
    let mut weights = Array2::<f64>::zeros((n, n));
    let mut rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            row,
            message: e.to_string(),
        })?;
        if rows >= n {
            return Err(Error::Parse {
                path: display,
                row,
                message: format!("more rows than the {n} stations in the header"),
            });
        }
        if record.len() != n + 1 {
            return Err(Error::Parse {
                path: display,
                row,
                message: format!("expected {} fields, found {}", n + 1, record.len()),
            });
        }
        if record[0] != node_ids[rows] {
            return Err(Error::Parse {
                path: display,
                row,
                message: format!(
                    "row label {:?} does not match header order ({:?} expected)",
                    &record[0], node_ids[rows]
                ),
            });
        }
        for j in 0..n {
            weights[[rows, j]] = record[j + 1].parse().map_err(|e| Error::Parse {
                path: display.clone(),
                row,
                message: format!("weight column {}: {e}", j + 1),
            })?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Parse {
            path: display,
            row: rows,
            message: format!("{rows} weight rows for {n} stations"),
        });
    }
    Ok((node_ids, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_dataset() -> SpatioTemporalDataset {
        let values = Array3::from_shape_vec(
            (2, 3, 1),
            vec![1.0, 3.0, 0.0, 1.0, 3.0, 1.0],
        )
        .unwrap();
        let mask = Array3::from_shape_vec(
            (2, 3, 1),
            vec![true, true, false, true, true, true],
        )
        .unwrap();
        SpatioTemporalDataset {
            values,
            mask,
            node_ids: vec!["a".into(), "b".into()],
            feature_ids: vec!["x".into()],
            timestamps: vec![0, 1, 2],
            adjacency: array![[0.0, 1.0], [1.0, 0.0]],
        }
    }

    #[test]
    fn three_station_line_matches_hand_rolled_kernel() {
        // Stations at 0, 1, 3 on a line: pairwise distances 1, 2, 3, kernel
        // scale sigma^2 = (1 + 4 + 9) / 3. Weights evaluated by hand.
        let coords = [(0.0, 0.0), (1.0, 0.0), (3.0, 0.0)];
        let adj = build_gaussian_adjacency(&coords, GeoMetric::Euclidean, 0.0).unwrap();
        let w01 = 0.8071177470053893;
        let w12 = 0.42437284567695;
        let w02 = 0.14535570123384667;
        assert!((adj[[0, 1]] - w01).abs() < 1e-12);
        assert!((adj[[1, 2]] - w12).abs() < 1e-12);
        assert!((adj[[0, 2]] - w02).abs() < 1e-12);
        // symmetry and zero diagonal
        for i in 0..3 {
            assert_eq!(adj[[i, i]], 0.0);
            for j in 0..3 {
                assert_eq!(adj[[i, j]], adj[[j, i]]);
            }
        }
    }

    #[test]
    fn two_stations_always_weigh_exp_minus_one() {
        for d in [0.5, 68.0, 1234.5] {
            let coords = [(0.0, 0.0), (d, 0.0)];
            let adj = build_gaussian_adjacency(&coords, GeoMetric::Euclidean, 0.1).unwrap();
            assert!((adj[[0, 1]] - (-1.0f64).exp()).abs() < 1e-12, "d = {d}");
        }
    }

    #[test]
    fn threshold_above_weight_cuts_to_zero_matrix() {
        let coords = [(0.0, 0.0), (10.0, 0.0)];
        let adj = build_gaussian_adjacency(&coords, GeoMetric::Euclidean, 0.5).unwrap();
        assert!(adj.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn colocated_stations_are_degenerate() {
        let coords = [(2.0, 2.0), (2.0, 2.0), (2.0, 2.0)];
        assert!(matches!(
            build_gaussian_adjacency(&coords, GeoMetric::Euclidean, 0.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn haversine_distances_match_reference_values() {
        let d_lon = station_distance(GeoMetric::Haversine, (52.0, 4.0), (52.0, 5.0));
        assert!((d_lon - 68.4578930279912).abs() < 1e-9);
        let d_lat = station_distance(GeoMetric::Haversine, (52.0, 4.0), (53.0, 4.0));
        assert!((d_lat - 111.19492664455873).abs() < 1e-9);
    }

    #[test]
    fn invalid_latitude_is_rejected() {
        let coords = [(95.0, 0.0), (0.0, 0.0)];
        assert!(matches!(
            build_gaussian_adjacency(&coords, GeoMetric::Haversine, 0.0),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn normalize_zscores_observed_and_zeroes_missing() {
        let ds = toy_dataset();
        let (norm, stats) = normalize(&ds).unwrap();
        // observed values {1, 3, 1, 3, 1}: mean 1.8, population stdev sqrt(0.96)
        assert!((stats.mean[0] - 1.8).abs() < 1e-12);
        assert!((stats.std[0] - 0.96f64.sqrt()).abs() < 1e-12);
        assert_eq!(norm.values[[0, 2, 0]], 0.0); // missing cell forced to zero
        for i in 0..2 {
            for t in 0..3 {
                if ds.mask[[i, t, 0]] {
                    let want = (ds.values[[i, t, 0]] - 1.8) / 0.96f64.sqrt();
                    assert!((norm.values[[i, t, 0]] - want).abs() < 1e-12);
                }
            }
        }
        let back = denormalize(&norm.values, &stats).unwrap();
        for i in 0..2 {
            for t in 0..3 {
                if ds.mask[[i, t, 0]] {
                    assert!((back[[i, t, 0]] - ds.values[[i, t, 0]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_feature_fails_normalization() {
        let mut ds = toy_dataset();
        ds.values.fill(7.0);
        assert!(matches!(normalize(&ds), Err(Error::Degenerate(_))));
    }

    #[test]
    fn window_split_counts_are_exact() {
        let w = window_split(8688, 24, 24).unwrap();
        assert_eq!(w.len(), 362);
        assert_eq!(w[0], Window { start: 0, len: 24 });
        assert_eq!(w[361].end(), 8688);

        let overlapping = window_split(100, 24, 12).unwrap();
        assert_eq!(overlapping.len(), 7);
        assert_eq!(overlapping.last().unwrap().end(), 96);

        assert!(window_split(10, 24, 24).is_err());
        assert!(window_split(10, 0, 1).is_err());
    }

    #[test]
    fn transitions_row_normalize_and_keep_zero_degree_rows() {
        let adj = array![[0.0, 2.0, 0.0], [0.0, 0.0, 0.0], [1.0, 3.0, 0.0]];
        let tr = transitions(&adj);
        // forward: row sums 2, 0, 4
        assert!((tr.forward[[0, 1]] - 1.0).abs() < 1e-15);
        assert!(tr.forward.row(1).iter().all(|&v| v == 0.0));
        assert!((tr.forward[[2, 0]] - 0.25).abs() < 1e-15);
        assert!((tr.forward[[2, 1]] - 0.75).abs() < 1e-15);
        // backward: column sums of adj are 1, 5, 0
        assert!((tr.backward[[0, 2]] - 1.0).abs() < 1e-15);
        assert!((tr.backward[[1, 0]] - 0.4).abs() < 1e-15);
        assert!((tr.backward[[1, 2]] - 0.6).abs() < 1e-15);
        assert!(tr.backward.row(2).iter().all(|&v| v == 0.0));
        // rows with positive degree are stochastic
        let row_sum: f64 = tr.forward.row(0).sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn long_form_roundtrip_preserves_values_and_mask() {
        let dir = std::env::temp_dir().join(format!("gsli-dm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let ds = toy_dataset();
        save_dataset_csv(&ds, &path).unwrap();
        let loaded = load_dataset(
            &path,
            ds.node_ids.clone(),
            ds.adjacency.clone(),
            &LoadSchema::default(),
        )
        .unwrap();
        assert_eq!(loaded.n(), 2);
        assert_eq!(loaded.t(), 3);
        assert_eq!(loaded.f(), 1);
        assert_eq!(loaded.mask, ds.mask);
        // mask conservation: one empty value field in the file
        assert_eq!(
            loaded.mask.len() - loaded.observed_count(),
            1,
            "exactly the empty cell is missing"
        );
        for (a, b) in loaded.values.iter().zip(ds.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn adjacency_csv_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join(format!("gsli-dm-adj-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("adjacency.csv");
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let adj = array![
            [0.0, 0.25, 0.5],
            [0.25, 0.0, 0.125],
            [0.5, 0.125, 0.0]
        ];
        save_adjacency_csv(&adj, &ids, &path).unwrap();
        let (loaded_ids, loaded) = load_adjacency_csv(&path).unwrap();
        assert_eq!(loaded_ids, ids);
        assert_eq!(loaded, adj);

        let truncated = dir.join("short.csv");
        std::fs::write(&truncated, "node_id,a,b\na,0,1\n").unwrap();
        assert!(load_adjacency_csv(&truncated).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn duplicate_cells_and_irregular_grids_are_rejected() {
        let dir = std::env::temp_dir().join(format!("gsli-dm2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let adj = array![[0.0]];

        let dup = dir.join("dup.csv");
        std::fs::write(
            &dup,
            "node_id,timestamp,feature_id,value\na,0,x,1.0\na,0,x,2.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&dup, vec!["a".into()], adj.clone(), &LoadSchema::default()),
            Err(Error::Inconsistent(_))
        ));

        let gappy = dir.join("gappy.csv");
        std::fs::write(
            &gappy,
            "node_id,timestamp,feature_id,value\na,0,x,1.0\na,1,x,2.0\na,5,x,3.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&gappy, vec!["a".into()], adj.clone(), &LoadSchema::default()),
            Err(Error::Inconsistent(_))
        ));

        let unknown = dir.join("unknown.csv");
        std::fs::write(
            &unknown,
            "node_id,timestamp,feature_id,value\nzz,0,x,1.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&unknown, vec!["a".into()], adj, &LoadSchema::default()),
            Err(Error::Inconsistent(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
