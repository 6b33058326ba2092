use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ParamVector, N_FEATURES};
use crate::error::{Error, Result};
use crate::rng::{rng_for, SimRng};

/// Columns in a CMAPSS row: unit, cycle, three operating settings, 21 sensors.
const TURBOFAN_COLUMNS: usize = 26;

/// Zero-based column indices of the sensors used as features.
///
/// Sensors 2, 3, 4, 7, 11, 12, 15, 17, 20 and 21 (one-based, in the order the
/// sensors appear after the three operating settings). The remaining sensors
/// are constant or near-constant under a single operating condition.
pub const TURBOFAN_FEATURE_COLUMNS: [usize; N_FEATURES] = [6, 7, 8, 11, 15, 16, 19, 21, 24, 25];

/// Feature matrix (row-major, [`N_FEATURES`] columns) and regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one row".into()));
        }
        if features.len() != targets.len() * N_FEATURES {
            return Err(Error::Dimension(format!(
                "{} feature values for {} rows of {N_FEATURES} features",
                features.len(),
                targets.len()
            )));
        }
        if !features.iter().chain(&targets).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains NaN or Inf".into()));
        }
        Ok(Dataset { features, targets })
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * N_FEATURES..(i + 1) * N_FEATURES]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Copies out the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * N_FEATURES);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Dataset { features, targets }
    }

    pub(crate) fn targets_mut(&mut self) -> &mut [f64] {
        &mut self.targets
    }
}

/// Reads a CMAPSS training file (e.g. `train_FD001.txt`).
pub fn load_turbofan(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_turbofan(&text)
}

/// Parses CMAPSS text: selects [`TURBOFAN_FEATURE_COLUMNS`], z-scores each
/// feature and sets the target to remaining useful life (last cycle of the
/// unit minus the current cycle).
pub fn parse_turbofan(text: &str) -> Result<Dataset> {
    let mut units = Vec::new();
    let mut cycles = Vec::new();
    let mut features = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::Parse { line: line_no, msg: format!("non-numeric token `{tok}`") })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() < TURBOFAN_COLUMNS {
            return Err(Error::Dimension(format!(
                "line {line_no}: expected {TURBOFAN_COLUMNS} columns, found {}",
                values.len()
            )));
        }
        units.push(values[0] as i64);
        cycles.push(values[1]);
        features.extend(TURBOFAN_FEATURE_COLUMNS.iter().map(|&c| values[c]));
    }
    if units.is_empty() {
        return Err(Error::InvalidArgument("turbofan file has no rows".into()));
    }

    let mut max_cycle = std::collections::HashMap::new();
    for (&u, &c) in units.iter().zip(&cycles) {
        let e = max_cycle.entry(u).or_insert(c);
        if c > *e {
            *e = c;
        }
    }
    let targets = units.iter().zip(&cycles).map(|(u, c)| max_cycle[u] - c).collect();

    zscore_columns(&mut features);
    Dataset::new(features, targets)
}

fn zscore_columns(features: &mut [f64]) {
    let rows = features.len() / N_FEATURES;
    for col in 0..N_FEATURES {
        let mean = (0..rows).map(|r| features[r * N_FEATURES + col]).sum::<f64>() / rows as f64;
        let var =
            (0..rows).map(|r| (features[r * N_FEATURES + col] - mean).powi(2)).sum::<f64>() / rows as f64;
        // constant columns are only centred
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for r in 0..rows {
            let v = &mut features[r * N_FEATURES + col];
            *v = (*v - mean) / sd;
        }
    }
}

/// Synthetic linear-regression data together with its generating parameters.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub true_params: ParamVector,
}

pub const DEFAULT_SYNTHETIC_NOISE: f64 = 0.5;

/// Standard-normal features, `y = w*·x + b* + e` with `e ~ N(0, 0.5²)`.
pub fn generate_synthetic(n_rows: usize, seed: u64) -> Result<SyntheticData> {
    generate_synthetic_with_noise(n_rows, DEFAULT_SYNTHETIC_NOISE, seed)
}

pub fn generate_synthetic_with_noise(n_rows: usize, noise_std: f64, seed: u64) -> Result<SyntheticData> {
    if n_rows < 10 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 10 rows, got {n_rows}"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std = {noise_std}")));
    }
    let mut rng = rng_for(seed, &[0x05e7_e71c]);
    let truth: Vec<f64> = (0..=N_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut features = Vec::with_capacity(n_rows * N_FEATURES);
    let mut targets = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let start = features.len();
        features.extend((0..N_FEATURES).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &features[start..];
        let noise: f64 = rng.sample(StandardNormal);
        let y = x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + truth[N_FEATURES];
        targets.push(y + noise_std * noise);
    }
    Ok(SyntheticData { dataset: Dataset::new(features, targets)?, true_params: ParamVector::new(truth) })
}

fn shuffled_indices(n: usize, rng: &mut SimRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Random disjoint shards whose sizes differ by at most one.
pub fn partition(dataset: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<Dataset>> {
    if n_clients == 0 || n_clients > dataset.rows() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} rows across {n_clients} clients",
            dataset.rows()
        )));
    }
    let idx = shuffled_indices(dataset.rows(), &mut rng_for(seed, &[0x9a47]));
    let base = dataset.rows() / n_clients;
    let extra = dataset.rows() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for k in 0..n_clients {
        let len = base + usize::from(k < extra);
        shards.push(dataset.select(&idx[start..start + len]));
        start += len;
    }
    Ok(shards)
}

/// Splits off `fraction` of the rows (at least one, at most rows - 1) as a
/// held-out set. Returns `(train, holdout)`.
pub fn split_holdout(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || dataset.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {fraction} over {} rows",
            dataset.rows()
        )));
    }
    let n_hold = ((dataset.rows() as f64 * fraction).round() as usize).clamp(1, dataset.rows() - 1);
    let idx = shuffled_indices(dataset.rows(), &mut rng_for(seed, &[0x401d]));
    let (hold, train) = idx.split_at(n_hold);
    Ok((dataset.select(train), dataset.select(hold)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turbofan_line(unit: u32, cycle: u32, sensor_base: f64) -> String {
        let mut cols = vec![unit.to_string(), cycle.to_string()];
        cols.extend(["-0.0007", "-0.0004", "100.0"].map(String::from));
        for s in 0..21 {
            cols.push(format!("{:.4}", sensor_base + s as f64 + cycle as f64 * 0.01));
        }
        cols.join(" ")
    }

    #[test]
    fn turbofan_rul_targets() {
        let mut text = String::new();
        for c in 1..=192 {
            text.push_str(&turbofan_line(1, c, 500.0));
            text.push('\n');
        }
        for c in 1..=5 {
            text.push_str(&turbofan_line(2, c, 520.0));
            text.push('\n');
        }
        let ds = parse_turbofan(&text).unwrap();
        assert_eq!(ds.rows(), 197);
        assert_eq!(ds.target(191), 0.0);
        assert_eq!(ds.target(0), 191.0);
        assert_eq!(ds.target(192), 4.0);
        // z-scored features
        let mean0 = (0..ds.rows()).map(|r| ds.row(r)[0]).sum::<f64>() / ds.rows() as f64;
        assert!(mean0.abs() < 1e-9);
    }

    #[test]
    fn turbofan_non_numeric_names_line() {
        let text = format!("{}\n{}\n", turbofan_line(1, 1, 1.0), "1 2 x");
        match parse_turbofan(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn turbofan_missing_columns() {
        assert!(matches!(parse_turbofan("1 1 0.0 0.0 100.0 518.67\n"), Err(Error::Dimension(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(50, 0).unwrap();
        let b = generate_synthetic(50, 0).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.true_params, b.true_params);
        assert_ne!(a.dataset, generate_synthetic(50, 1).unwrap().dataset);
    }

    #[test]
    fn synthetic_rejects_tiny() {
        assert!(matches!(generate_synthetic(5, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn partition_even_split() {
        let ds = generate_synthetic(100, 3).unwrap().dataset;
        let shards = partition(&ds, 10, 1).unwrap();
        assert!(shards.iter().all(|s| s.rows() == 10));
        assert_eq!(shards, partition(&ds, 10, 1).unwrap());
    }

    #[test]
    fn partition_rejects_bad_counts() {
        let ds = generate_synthetic(10, 3).unwrap().dataset;
        assert!(partition(&ds, 0, 0).is_err());
        assert!(partition(&ds, 11, 0).is_err());
    }

    #[test]
    fn holdout_sizes() {
        let ds = generate_synthetic(100, 3).unwrap().dataset;
        let (train, hold) = split_holdout(&ds, 0.2, 9).unwrap();
        assert_eq!((train.rows(), hold.rows()), (80, 20));
    }
}
