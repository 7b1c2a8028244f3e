//! Dataset handling: CSV ingestion, standardization, deterministic splits,
//! and synthetic labeled populations sampled from an SCM.
//!
//! Standardization parameters are computed on the training split only and
//! recorded so that the exact transform can be re-applied. Uncertainty radii
//! downstream are interpreted on standardized features, so an `epsilon`
//! guard corresponds to at least `epsilon` standard deviations of any single
//! feature.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{real, Real};
use crate::recourse::FeasibilitySpec;
use crate::scm::{Scm, ScmError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("label column `{0}` not found in header")]
    LabelColumnMissing(String),
    #[error("missing values in rows {0:?}")]
    MissingValues(Vec<usize>),
    #[error("label in row {row} is `{value}`, expected 0 or 1")]
    NonBinaryLabel { row: usize, value: String },
    #[error("column `{0}` is constant; cannot standardize")]
    ConstantColumn(String),
    #[error("dataset is empty")]
    Empty,
    #[error("row {row} has {got} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("train fraction {0} outside (0, 1)")]
    BadSplitFraction(f64),
    #[error("feasibility file: {0}")]
    Feasibility(#[from] serde_json::Error),
    #[error(transparent)]
    Scm(#[from] ScmError),
}

/// Per-feature affine transform `x -> (x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization<R> {
    pub mean: Vec<R>,
    pub std: Vec<R>,
}

impl<R: Real> Standardization<R> {
    pub fn apply(&self, x: &[R]) -> Vec<R> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[R]) -> Vec<R> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }
}

/// A labeled population. `features` is row-major (one inner vec per
/// individual), labels are 0/1.
#[derive(Debug, Clone)]
pub struct Dataset<R> {
    pub features: Vec<Vec<R>>,
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization<R>>,
    pub scm_ref: Option<String>,
}

impl<R: Real> Dataset<R> {
    pub fn new(
        features: Vec<Vec<R>>,
        labels: Vec<u8>,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if features.is_empty() {
            return Err(DataError::Empty);
        }
        debug_assert_eq!(features.len(), labels.len());
        Ok(Dataset {
            features,
            labels,
            feature_names,
            standardization: None,
            scm_ref: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Deterministic shuffled split into (train, test). The two parts
    /// partition the rows exactly.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self), DataError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DataError::BadSplitFraction(train_fraction));
        }
        let mut idx: Vec<usize> = (0..self.n_rows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let k = ((self.n_rows() as f64) * train_fraction).round() as usize;
        let k = k.clamp(1, self.n_rows() - 1);
        let take = |ids: &[usize]| Dataset {
            features: ids.iter().map(|&i| self.features[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
            scm_ref: self.scm_ref.clone(),
        };
        Ok((take(&idx[..k]), take(&idx[k..])))
    }

    /// Compute standardization parameters on this split and apply them.
    /// Constant columns are a hard error.
    pub fn standardize(&mut self) -> Result<Standardization<R>, DataError> {
        let n = self.n_rows();
        let d = self.n_features();
        let inv_n = R::one() / real::<R>(n as f64);
        let mut mean = vec![R::zero(); d];
        for row in &self.features {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut var = vec![R::zero(); d];
        for row in &self.features {
            for (j, (&v, &m)) in row.iter().zip(&mean).enumerate() {
                let c = v - m;
                var[j] += c * c;
            }
        }
        let mut std = vec![R::zero(); d];
        for (j, v) in var.iter().enumerate() {
            let s = (*v * inv_n).sqrt();
            if s == R::zero() {
                return Err(DataError::ConstantColumn(self.feature_names[j].clone()));
            }
            std[j] = s;
        }
        let params = Standardization { mean, std };
        self.apply_standardization(&params);
        Ok(params)
    }

    /// Apply previously computed parameters (e.g. to a test split).
    pub fn apply_standardization(&mut self, params: &Standardization<R>) {
        for row in self.features.iter_mut() {
            let z = params.apply(row);
            *row = z;
        }
        self.standardization = Some(params.clone());
    }

    /// Indices of rows the classifier rejects, in row order.
    pub fn negatively_classified<S: crate::model::Scorer<R>>(&self, scorer: &S) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| !scorer.decide(&self.features[i]))
            .collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (self.n_rows() - pos, pos)
    }
}

/// Ground-truth labeling rule for synthetic populations: a linear score on
/// the raw features with independent label flips at `noise_rate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Labeler {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub noise_rate: f64,
}

impl Labeler {
    pub fn score<R: Real>(&self, x: &[R]) -> R {
        let w: Vec<R> = self.weights.iter().map(|&v| real(v)).collect();
        crate::num::dot(&w, x) + real(self.bias)
    }
}

/// Sample `n_samples` individuals from the SCM's observational distribution
/// and label them with the ground-truth rule. Deterministic given `seed`.
pub fn synthesize<R: Real>(
    scm: &Scm<R>,
    n_samples: usize,
    labeler: &Labeler,
    seed: u64,
) -> Result<Dataset<R>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let u = scm.sample_exogenous(&mut rng);
        let x = scm.reconstruct(&u)?;
        let mut y = u8::from(labeler.score(&x) >= R::zero());
        // Always consume the flip draw so the sampled individuals are
        // identical across noise rates at a fixed seed.
        if rng.gen::<f64>() < labeler.noise_rate {
            y = 1 - y;
        }
        features.push(x);
        labels.push(y);
    }
    Dataset::new(features, labels, scm.feature_names().to_vec())
}

/// Load an RFC-4180 style CSV with a header row. The label column must be
/// binary; non-numeric feature columns are coerced to real-valued category
/// codes (sorted unique values map to 0, 1, ...). An optional actionability
/// file yields the feasibility constraints; otherwise every feature is
/// treated as freely actionable.
pub fn load_csv<R: Real>(
    path: &Path,
    label_column: &str,
    actionability_path: Option<&Path>,
) -> Result<(Dataset<R>, FeasibilitySpec), DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::LabelColumnMissing(label_column.to_string()))?;

    let mut raw: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(DataError::RaggedRow {
                row: i + 1,
                expected: headers.len(),
                got: record.len(),
            });
        }
        raw.push(record.iter().map(str::to_string).collect());
    }
    if raw.is_empty() {
        return Err(DataError::Empty);
    }

    let missing: Vec<usize> = raw
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().any(|cell| cell.trim().is_empty()))
        .map(|(i, _)| i + 1)
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingValues(missing));
    }

    let mut labels = Vec::with_capacity(raw.len());
    for (i, row) in raw.iter().enumerate() {
        match row[label_idx].trim() {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(DataError::NonBinaryLabel {
                    row: i + 1,
                    value: other.to_string(),
                })
            }
        }
    }

    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_idx).collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| headers[c].clone()).collect();

    // Column-wise parse; fall back to category codes when any cell is
    // non-numeric.
    let mut columns: Vec<Vec<R>> = Vec::with_capacity(feature_cols.len());
    for &c in &feature_cols {
        let cells: Vec<&str> = raw.iter().map(|row| row[c].trim()).collect();
        let parsed: Option<Vec<f64>> = cells.iter().map(|s| s.parse::<f64>().ok()).collect();
        let col: Vec<f64> = match parsed {
            Some(nums) => nums,
            None => {
                let mut uniq: Vec<&str> = cells.clone();
                uniq.sort_unstable();
                uniq.dedup();
                cells
                    .iter()
                    .map(|s| uniq.binary_search(s).unwrap() as f64)
                    .collect()
            }
        };
        columns.push(col.into_iter().map(real).collect());
    }

    let features: Vec<Vec<R>> = (0..raw.len())
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();
    let dataset = Dataset::new(features, labels, feature_names.clone())?;

    let feasibility = match actionability_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            FeasibilitySpec::from_json(&text)?
        }
        None => FeasibilitySpec::all_free(&feature_names),
    };
    Ok((dataset, feasibility))
}

/// Sidecar record of how a dataset was produced and transformed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_rows: usize,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scm: Option<String>,
    #[serde(default)]
    pub standardization: Option<StandardizationFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizationFile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationFile {
    pub fn from_params<R: Real>(params: &Standardization<R>) -> Self {
        StandardizationFile {
            mean: params.mean.iter().map(|v| v.to_f64().unwrap()).collect(),
            std: params.std.iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }

    pub fn to_params<R: Real>(&self) -> Standardization<R> {
        Standardization {
            mean: self.mean.iter().copied().map(real).collect(),
            std: self.std.iter().copied().map(real).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::builtin_scm;
    use std::io::Write;

    fn write_temp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("recourse-core-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn toy_csv_loads_and_standardizes() {
        let path = write_temp(
            "toy.csv",
            "a,b,label\n1.0,x,0\n2.0,y,1\n3.0,x,0\n4.0,z,1\n",
        );
        let (mut ds, feas) = load_csv::<f64>(&path, "label", None).unwrap();
        assert_eq!(ds.n_rows(), 4);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.labels, vec![0, 1, 0, 1]);
        // Categorical column b coerced: x -> 0, y -> 1, z -> 2.
        assert_eq!(ds.features[1][1], 1.0);
        assert_eq!(ds.features[3][1], 2.0);
        assert_eq!(feas.n(), 2);

        let params = ds.standardize().unwrap();
        for j in 0..2 {
            let mean: f64 = ds.features.iter().map(|r| r[j]).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-8 * 4.0);
            let var: f64 = ds.features.iter().map(|r| r[j] * r[j]).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() <= 1e-10);
        }

        // Re-applying stored parameters reproduces the matrix bit-exactly.
        let (mut ds2, _) = load_csv::<f64>(&path, "label", None).unwrap();
        ds2.apply_standardization(&params);
        assert_eq!(ds.features, ds2.features);
    }

    #[test]
    fn constant_column_is_an_error_naming_the_column() {
        let path = write_temp("const.csv", "a,b,label\n1.0,5,0\n2.0,5,1\n");
        let (mut ds, _) = load_csv::<f64>(&path, "label", None).unwrap();
        match ds.standardize() {
            Err(DataError::ConstantColumn(name)) => assert_eq!(name, "b"),
            other => panic!("expected ConstantColumn, got {other:?}"),
        }
    }

    #[test]
    fn missing_values_error_lists_rows() {
        let path = write_temp("missing.csv", "a,label\n1.0,0\n,1\n3.0,0\n,1\n");
        match load_csv::<f64>(&path, "label", None) {
            Err(DataError::MissingValues(rows)) => assert_eq!(rows, vec![2, 4]),
            other => panic!("expected MissingValues, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_label_is_an_error() {
        let path = write_temp("labels.csv", "a,label\n1.0,0\n2.0,2\n");
        assert!(matches!(
            load_csv::<f64>(&path, "label", None),
            Err(DataError::NonBinaryLabel { row: 2, .. })
        ));
    }

    #[test]
    fn standardization_roundtrip() {
        let scm = builtin_scm::<f64>("loan-like").unwrap();
        let labeler = Labeler {
            weights: vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            bias: 0.0,
            noise_rate: 0.0,
        };
        let mut ds = synthesize(&scm, 200, &labeler, 5).unwrap();
        let raw = ds.features.clone();
        let params = ds.standardize().unwrap();
        for (orig, std) in raw.iter().zip(&ds.features) {
            let back = params.invert(std);
            for (a, b) in orig.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions_exactly() {
        let scm = builtin_scm::<f64>("imf-3").unwrap();
        let labeler = Labeler {
            weights: vec![1.0, 0.0, 0.0],
            bias: 0.0,
            noise_rate: 0.0,
        };
        let ds = synthesize(&scm, 100, &labeler, 1).unwrap();
        let (tr1, te1) = ds.split(0.8, 42).unwrap();
        let (tr2, te2) = ds.split(0.8, 42).unwrap();
        assert_eq!(tr1.features, tr2.features);
        assert_eq!(te1.features, te2.features);
        assert_eq!(tr1.n_rows(), 80);
        assert_eq!(te1.n_rows(), 20);

        let (tr3, _) = ds.split(0.8, 43).unwrap();
        assert_ne!(tr1.features, tr3.features);
    }

    #[test]
    fn synthesize_is_deterministic_and_labels_follow_the_rule() {
        let scm = builtin_scm::<f64>("income-savings").unwrap();
        let labeler = Labeler {
            weights: vec![1.0, 0.0],
            bias: 0.0,
            noise_rate: 0.0,
        };
        let a = synthesize(&scm, 300, &labeler, 7).unwrap();
        let b = synthesize(&scm, 300, &labeler, 7).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        for (x, &y) in a.features.iter().zip(&a.labels) {
            assert_eq!(y, u8::from(x[0] >= 0.0));
        }
        // Noise flips some labels deterministically.
        let noisy = synthesize(
            &scm,
            300,
            &Labeler {
                noise_rate: 0.2,
                ..labeler
            },
            7,
        )
        .unwrap();
        let flips = noisy
            .labels
            .iter()
            .zip(&a.labels)
            .filter(|(n, c)| n != c)
            .count();
        assert!(flips > 20 && flips < 120, "flips = {flips}");
    }
}
