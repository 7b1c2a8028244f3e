//! Experiment configuration: JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use recourse_core::data::Labeler;
use recourse_core::model::{ModelSpec, Objective};
use recourse_core::recourse::PgdParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub scm: ScmConfig,
    #[serde(default)]
    pub feasibility: FeasibilityConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub regularizers: RegularizersConfig,
    /// Radius used by the regularizer-comparison pipeline.
    #[serde(default = "default_robust_eps")]
    pub robust_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of seeds (train/test splits) for multi-seed commands.
    #[serde(default)]
    pub n_seeds: Option<usize>,
    /// At most this many negatively classified individuals per experiment.
    #[serde(default = "default_sample_cap")]
    pub sample_cap: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_robust_eps() -> f64 {
    0.1
}

fn default_sample_cap() -> usize {
    1000
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Sample from the configured SCM with a ground-truth labeling rule.
    Synthetic {
        n_samples: usize,
        labeler: Labeler,
    },
    /// Load a CSV with a binary label column.
    Csv {
        path: PathBuf,
        label: String,
        #[serde(default)]
        actionability: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScmConfig {
    Builtin { builtin: String },
    File { file: PathBuf },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityConfig {
    /// Builtin constraints when the SCM ships some, otherwise all-free.
    #[default]
    Auto,
    File {
        file: PathBuf,
    },
    /// Every feature actionable and unbounded.
    Free,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ModelSpec,
    pub objective: Objective,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_epochs() -> usize {
    100
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub epsilons: Vec<f64>,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            epsilons: vec![1e-3, 1e-2, 1e-1, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSchedule {
    #[default]
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub lambda0: f64,
    /// Overrides the schedule's default multiplier when set.
    pub gamma: Option<f64>,
    pub schedule: LambdaSchedule,
    pub n_max: usize,
    pub inner_steps: usize,
    pub alpha: f64,
    pub pga_steps: usize,
    pub pga_step_frac: f64,
    pub converge_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let p = PgdParams::default();
        SolverConfig {
            lambda0: p.lambda0,
            gamma: None,
            schedule: LambdaSchedule::Increasing,
            n_max: p.n_max,
            inner_steps: p.inner_steps,
            alpha: p.alpha,
            pga_steps: p.pga_steps,
            pga_step_frac: p.pga_step_frac,
            converge_tol: p.converge_tol,
        }
    }
}

impl SolverConfig {
    pub fn to_params(&self) -> PgdParams {
        let gamma = self.gamma.unwrap_or(match self.schedule {
            LambdaSchedule::Increasing => 1.0 / 0.9,
            LambdaSchedule::Decreasing => 0.9,
        });
        PgdParams {
            lambda0: self.lambda0,
            gamma,
            n_max: self.n_max,
            inner_steps: self.inner_steps,
            alpha: self.alpha,
            pga_steps: self.pga_steps,
            pga_step_frac: self.pga_step_frac,
            converge_tol: self.converge_tol,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub c_lo: f64,
    pub c_hi: f64,
    pub bisection_steps: usize,
    pub inner_iters: usize,
    pub step: f64,
    pub restarts: usize,
    pub init_sd: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let p = recourse_core::attack::CwParams::default();
        AttackConfig {
            c_lo: p.c_lo,
            c_hi: p.c_hi,
            bisection_steps: p.bisection_steps,
            inner_iters: p.inner_iters,
            step: p.step,
            restarts: p.restarts,
            init_sd: p.init_sd,
        }
    }
}

impl AttackConfig {
    pub fn to_params(&self) -> recourse_core::attack::CwParams {
        recourse_core::attack::CwParams {
            c_lo: self.c_lo,
            c_hi: self.c_hi,
            bisection_steps: self.bisection_steps,
            inner_iters: self.inner_iters,
            step: self.step,
            restarts: self.restarts,
            init_sd: self.init_sd,
        }
    }
}

/// Regularizer-comparison hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizersConfig {
    pub allr_mu1: f64,
    pub allr_mu2: f64,
    /// Defaults to `robust_eps` when unset.
    pub allr_eps_reg: Option<f64>,
    pub ross_mu: f64,
    pub ross_steps: usize,
    /// Additionally run the two single-term variants of the combined
    /// regularizer.
    pub include_ablations: bool,
}

impl Default for RegularizersConfig {
    fn default() -> Self {
        RegularizersConfig {
            allr_mu1: 3.0,
            allr_mu2: 0.1,
            allr_eps_reg: None,
            ross_mu: 0.8,
            ross_steps: 10,
            include_ablations: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| "parsing config JSON")?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let eps = &self.uncertainty.epsilons;
        if eps.iter().any(|&e| e < 0.0 || !e.is_finite()) {
            bail!("uncertainty levels must be finite and nonnegative");
        }
        if eps.windows(2).any(|w| w[0] > w[1]) {
            bail!("uncertainty levels must be sorted ascending");
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            bail!("train_fraction must lie in (0, 1)");
        }
        if self.workers == 0 {
            bail!("workers must be >= 1");
        }
        if self.sample_cap == 0 {
            bail!("sample_cap must be >= 1");
        }
        if let DatasetSource::Synthetic { n_samples, .. } = &self.dataset.source {
            if *n_samples < 2 {
                bail!("n_samples must be >= 2");
            }
        }
        if let DatasetSource::Csv {
            path,
            actionability,
            ..
        } = &self.dataset.source
        {
            if !path.exists() {
                bail!("dataset csv {} does not exist", path.display());
            }
            if let Some(a) = actionability {
                if !a.exists() {
                    bail!("actionability file {} does not exist", a.display());
                }
            }
        }
        if let ScmConfig::File { file } = &self.scm {
            if !file.exists() {
                bail!("scm file {} does not exist", file.display());
            }
        }
        if let FeasibilityConfig::File { file } = &self.feasibility {
            if !file.exists() {
                bail!("feasibility file {} does not exist", file.display());
            }
        }
        Ok(())
    }

    /// Canonical serialization used for the output-file hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        if let Some(out) = &self.out {
            return Ok(out.clone());
        }
        if let Ok(dir) = std::env::var("RECOURSE_OUT") {
            return Ok(PathBuf::from(dir));
        }
        bail!("no output directory: set `out` in the config, pass --out, or set RECOURSE_OUT")
    }
}
