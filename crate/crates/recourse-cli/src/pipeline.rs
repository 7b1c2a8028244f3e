//! Shared experiment assembly: SCM + dataset + feasibility construction,
//! per-seed training, recourse/attack dispatch, and deterministic CSV
//! output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use recourse_core::attack::{analytic_min_invalidation, cw_min_invalidation};
use recourse_core::data::{load_csv, synthesize, Dataset, DatasetManifest, StandardizationFile};
use recourse_core::model::{
    accuracy, mcc_at_threshold, select_threshold, train, ActionabilityMask, Classifier, Scorer,
    TrainConfig, TrainReport,
};
use recourse_core::recourse::{
    builtin_feasibility, generate_recourse, is_valid_recourse, CostFn, FeasibilitySpec,
    RecourseAction, RecourseOutcome, UncertaintySpec,
};
use recourse_core::scm::{builtin_scm, Scm};

use crate::config::{DatasetSource, ExperimentConfig, FeasibilityConfig, ScmConfig};

/// First 16 hex chars of the canonical config digest; stamped on every
/// output row.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(config.canonical_json().as_bytes());
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        write!(out, "{byte:02x}").unwrap();
    }
    out
}

pub struct Experiment {
    pub scm: Scm<f64>,
    pub feasibility: FeasibilitySpec,
    pub mask: ActionabilityMask<f64>,
    pub cost: CostFn,
    pub hash: String,
    pub out_dir: PathBuf,
}

impl Experiment {
    pub fn assemble(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let scm = match &config.scm {
            ScmConfig::Builtin { builtin } => builtin_scm::<f64>(builtin)?,
            ScmConfig::File { file } => {
                let text = std::fs::read_to_string(file)
                    .with_context(|| format!("reading SCM {}", file.display()))?;
                Scm::from_json(&text)?
            }
        };
        let feasibility = match &config.feasibility {
            FeasibilityConfig::Auto => match &config.scm {
                ScmConfig::Builtin { builtin } => builtin_feasibility(builtin)
                    .unwrap_or_else(|| FeasibilitySpec::all_free(scm.feature_names())),
                ScmConfig::File { .. } => FeasibilitySpec::all_free(scm.feature_names()),
            },
            FeasibilityConfig::File { file } => {
                let text = std::fs::read_to_string(file)
                    .with_context(|| format!("reading feasibility {}", file.display()))?;
                FeasibilitySpec::from_json(&text)?
            }
            FeasibilityConfig::Free => FeasibilitySpec::all_free(scm.feature_names()),
        };
        if feasibility.n() != scm.n() {
            bail!(
                "feasibility covers {} features but the SCM has {}",
                feasibility.n(),
                scm.n()
            );
        }
        let mask = ActionabilityMask::from_feasibility(&feasibility);
        let out_dir = config.out_dir()?;
        Ok(Experiment {
            scm,
            feasibility,
            mask,
            cost: CostFn::l1(),
            hash: config_hash(config),
            out_dir,
        })
    }

    /// Standardized train/test split for one seed.
    pub fn dataset(&self, config: &ExperimentConfig, seed: u64) -> Result<(Dataset<f64>, Dataset<f64>)> {
        let full = match &config.dataset.source {
            DatasetSource::Synthetic { n_samples, labeler } => {
                let mut ds = synthesize(&self.scm, *n_samples, labeler, seed)?;
                ds.scm_ref = Some(match &config.scm {
                    ScmConfig::Builtin { builtin } => builtin.clone(),
                    ScmConfig::File { file } => file.display().to_string(),
                });
                ds
            }
            DatasetSource::Csv { path, label, actionability } => {
                let (ds, _feas) = load_csv::<f64>(path, label, actionability.as_deref())?;
                ds
            }
        };
        let (mut train_ds, mut test_ds) = full.split(config.dataset.train_fraction, seed)?;
        let params = train_ds.standardize()?;
        test_ds.apply_standardization(&params);
        Ok((train_ds, test_ds))
    }

    pub fn model_path(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("model_seed{seed}.json"))
    }

    /// Train one classifier, select its threshold on the test split, and
    /// report test accuracy and MCC.
    pub fn train_seed(
        &self,
        config: &ExperimentConfig,
        objective: recourse_core::model::Objective,
        seed: u64,
    ) -> Result<(Classifier<f64>, TrainReport, SeedMetrics)> {
        let (train_ds, test_ds) = self.dataset(config, seed)?;
        let train_config = TrainConfig {
            arch: config.model.arch.clone(),
            objective,
            epochs: config.model.epochs,
            lr: config.model.lr,
            batch: config.model.batch,
            seed,
        };
        let (mut classifier, report) = train(&train_ds, &train_config, Some(&self.mask))?;
        let threshold = select_threshold(&classifier, &test_ds.features, &test_ds.labels)?;
        classifier.set_threshold(threshold)?;
        let scores: Vec<f64> = test_ds
            .features
            .iter()
            .map(|x| classifier.score(x))
            .collect();
        let metrics = SeedMetrics {
            seed,
            threshold,
            accuracy: accuracy(&classifier, &test_ds.features, &test_ds.labels),
            mcc: mcc_at_threshold(&scores, &test_ds.labels, threshold),
            train_rows: train_ds.n_rows(),
            test_rows: test_ds.n_rows(),
        };
        Ok((classifier, report, metrics))
    }

    pub fn write_manifest(&self, config: &ExperimentConfig, seed: u64) -> Result<()> {
        let (train_ds, _) = self.dataset(config, seed)?;
        let manifest = DatasetManifest {
            n_rows: train_ds.n_rows(),
            n_features: train_ds.n_features(),
            feature_names: train_ds.feature_names.clone(),
            seed: Some(seed),
            scm: train_ds.scm_ref.clone(),
            standardization: train_ds
                .standardization
                .as_ref()
                .map(StandardizationFile::from_params),
        };
        write_text(
            &self.out_dir.join(format!("dataset_seed{seed}.json")),
            &serde_json::to_string_pretty(&manifest)?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct SeedMetrics {
    pub seed: u64,
    pub threshold: f64,
    pub accuracy: f64,
    pub mcc: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Minimal invalidating perturbation for a found action: the exact boundary
/// distance on linear instances, the gradient attack otherwise.
pub struct AttackOutcome {
    pub magnitude: f64,
    pub success: bool,
    pub certified: bool,
}

pub fn attack_action(
    classifier: &Classifier<f64>,
    scm: &Scm<f64>,
    x: &[f64],
    action: &RecourseAction<f64>,
    attack: &recourse_core::attack::CwParams,
    seed: u64,
) -> Result<AttackOutcome> {
    if classifier.linear_halfspace().is_some() && scm.is_linear() {
        let d = analytic_min_invalidation(classifier, scm, x, action)?;
        Ok(AttackOutcome {
            magnitude: d.max(0.0),
            success: true,
            certified: true,
        })
    } else {
        let result = cw_min_invalidation(classifier, scm, x, action, attack, seed)?;
        Ok(AttackOutcome {
            magnitude: result.magnitude,
            success: result.success,
            certified: false,
        })
    }
}

/// Generate recourse for one individual and re-check validity and
/// feasibility from scratch; an inconsistent solver result is a hard error.
pub fn checked_recourse(
    classifier: &Classifier<f64>,
    scm: &Scm<f64>,
    x: &[f64],
    feas: &FeasibilitySpec,
    unc: &UncertaintySpec,
    cost: &CostFn,
    params: &recourse_core::recourse::PgdParams,
) -> Result<Option<(RecourseAction<f64>, f64)>> {
    match generate_recourse(classifier, scm, x, feas, unc, cost, params)? {
        RecourseOutcome::NotFound => Ok(None),
        RecourseOutcome::Found(found) => {
            if !is_valid_recourse(classifier, scm, x, &found.action)? {
                bail!("internal consistency: solver returned an invalid action");
            }
            if !feas.is_feasible(x, &found.action) {
                bail!("internal consistency: solver returned an infeasible action");
            }
            Ok(Some((found.action, found.cost)))
        }
    }
}

/// Stable per-individual seed derivation.
pub fn mix_seed(base: u64, id: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(id as u64)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Deterministic CSV assembly: a header plus pre-sorted rows.
pub struct CsvFile {
    lines: Vec<String>,
}

impl CsvFile {
    pub fn new(header: &str) -> Self {
        CsvFile {
            lines: vec![header.to_string()],
        }
    }

    pub fn row(&mut self, line: String) {
        self.lines.push(line);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        write_text(path, &text)
    }
}

/// Plot-ready histogram over logarithmic bins spanning 1e-8 to 1.
/// Magnitudes below/above the range land in the edge bins; a final
/// overflow row counts failed attacks (infinite magnitude).
pub fn log_histogram(magnitudes: &[f64], hash: &str, seed: u64) -> CsvFile {
    const BINS: usize = 32;
    let mut counts = vec![0usize; BINS + 1];
    for &m in magnitudes {
        if !m.is_finite() {
            counts[BINS] += 1;
            continue;
        }
        let log = m.max(1e-300).log10();
        let pos = (log + 8.0) / 8.0 * BINS as f64;
        let idx = (pos.floor() as isize).clamp(0, BINS as isize - 1) as usize;
        counts[idx] += 1;
    }
    let mut csv = CsvFile::new("config_hash,seed,bin_low,bin_high,count");
    for (i, &count) in counts.iter().enumerate().take(BINS) {
        let lo = 10f64.powf(-8.0 + 8.0 * i as f64 / BINS as f64);
        let hi = 10f64.powf(-8.0 + 8.0 * (i + 1) as f64 / BINS as f64);
        csv.row(format!("{hash},{seed},{lo},{hi},{count}"));
    }
    csv.row(format!("{hash},{seed},inf,inf,{}", counts[BINS]));
    csv
}

/// Run per-individual jobs on a bounded worker pool and return results in
/// id order regardless of completion order.
pub fn parallel_map<T: Send, F>(workers: usize, ids: &[usize], job: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    let mut results: Vec<(usize, T)> = pool.install(|| {
        ids.par_iter()
            .map(|&id| job(id).map(|t| (id, t)))
            .collect::<Result<Vec<_>>>()
    })?;
    results.sort_by_key(|(id, _)| *id);
    Ok(results.into_iter().map(|(_, t)| t).collect())
}
