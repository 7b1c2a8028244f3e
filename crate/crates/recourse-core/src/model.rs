//! Classifiers and training.
//!
//! A classifier is a score function `h~: X -> (0, 1)` plus a decision
//! threshold `b`; the decision is `h(x) = 1` iff `h~(x) >= b`. Two
//! architectures are provided (logistic-linear and a small MLP), trained
//! with Adam under one of four objectives:
//!
//! - ERM: plain binary cross-entropy;
//! - AF: ERM with unactionable inputs zeroed by a mask;
//! - ALLR: ERM plus a local-linearity penalty and a penalty on the score
//!   gradient over unactionable features (the input gradient enters through
//!   a finite-difference stencil, so the whole penalty stays differentiable
//!   in the weights);
//! - Ross: ERM plus a term rewarding the existence of a small actionable
//!   move to the favorable class.
//!
//! The ALLR terms operate on the pre-sigmoid margin rather than the
//! squashed score; that is what makes the local-linearity term vanish
//! identically for linear classifiers.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    input_gradient_stencil, logit, sigmoid, AutodiffError, NodeId, Tape, Value,
};
use crate::data::Dataset;
use crate::num::{norm2, project_l2_ball, real, Real};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("validation data contains a single class")]
    SingleClassValidation,
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("mask length {got} does not match feature count {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("mask entries must be 0 or 1")]
    MaskEntries,
    #[error("config: {0}")]
    BadConfig(String),
    #[error("model file: {0}")]
    MalformedFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Anything that scores individuals and can rebuild its score on a tape so
/// the solvers can differentiate through it.
pub trait Scorer<R: Real> {
    fn n_features(&self) -> usize;

    /// Decision threshold `b` in (0, 1).
    fn threshold(&self) -> R;

    /// Score `h~(x)` in (0, 1).
    fn score(&self, x: &[R]) -> R;

    /// Build the score as a tape node; `x` is a vector node, weights enter
    /// as constants.
    fn score_node(&self, tape: &mut Tape<R>, x: NodeId) -> Result<NodeId, AutodiffError>;

    /// `h(x) = 1` iff the score clears the threshold.
    fn decide(&self, x: &[R]) -> bool {
        self.score(x) >= self.threshold()
    }

    /// For linear scorers: `(w, b~)` such that `h(x) = 1` iff `<w, x> >= b~`.
    fn linear_halfspace(&self) -> Option<(Vec<R>, R)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// One dense layer, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<R> {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<R>,
    pub biases: Vec<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierKind<R> {
    /// `h~(x) = sigmoid(<w, x> + c)`.
    Linear { weights: Vec<R>, bias: R },
    /// Hidden layers with a shared activation, then a sigmoid output unit.
    Mlp {
        hidden: Vec<Layer<R>>,
        activation: Activation,
        out_weights: Vec<R>,
        out_bias: R,
    },
}

/// Scoring function plus decision threshold. The optional `feature_mask`
/// zeroes inputs before scoring (used by actionable-features-only training).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<R> {
    pub kind: ClassifierKind<R>,
    threshold: R,
    pub feature_mask: Option<Vec<R>>,
    n_features: usize,
}

impl<R: Real> Classifier<R> {
    pub fn new_linear(weights: Vec<R>, bias: R, threshold: R) -> Result<Self, ModelError> {
        check_threshold(threshold)?;
        let n = weights.len();
        Ok(Classifier {
            kind: ClassifierKind::Linear { weights, bias },
            threshold,
            feature_mask: None,
            n_features: n,
        })
    }

    pub fn new_mlp(
        n_features: usize,
        hidden: Vec<Layer<R>>,
        activation: Activation,
        out_weights: Vec<R>,
        out_bias: R,
        threshold: R,
    ) -> Result<Self, ModelError> {
        check_threshold(threshold)?;
        Ok(Classifier {
            kind: ClassifierKind::Mlp {
                hidden,
                activation,
                out_weights,
                out_bias,
            },
            threshold,
            feature_mask: None,
            n_features,
        })
    }

    pub fn with_mask(mut self, mask: Vec<R>) -> Result<Self, ModelError> {
        if mask.len() != self.n_features {
            return Err(ModelError::MaskLength {
                expected: self.n_features,
                got: mask.len(),
            });
        }
        if !mask.iter().all(|&m| m == R::zero() || m == R::one()) {
            return Err(ModelError::MaskEntries);
        }
        self.feature_mask = Some(mask);
        Ok(self)
    }

    pub fn set_threshold(&mut self, b: R) -> Result<(), ModelError> {
        check_threshold(b)?;
        self.threshold = b;
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ClassifierKind::Linear { .. })
    }

    fn masked(&self, x: &[R]) -> Vec<R> {
        match &self.feature_mask {
            Some(m) => x.iter().zip(m).map(|(&v, &mm)| v * mm).collect(),
            None => x.to_vec(),
        }
    }

    /// Pre-sigmoid margin `z(x)`; the score is `sigmoid(z(x))`.
    pub fn margin(&self, x: &[R]) -> R {
        let x = self.masked(x);
        match &self.kind {
            ClassifierKind::Linear { weights, bias } => crate::num::dot(weights, &x) + *bias,
            ClassifierKind::Mlp {
                hidden,
                activation,
                out_weights,
                out_bias,
            } => {
                let mut h = x;
                for layer in hidden {
                    let mut z = vec![R::zero(); layer.rows];
                    for (r, zr) in z.iter_mut().enumerate() {
                        let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                        *zr = crate::num::dot(row, &h) + layer.biases[r];
                    }
                    h = z
                        .into_iter()
                        .map(|v| match activation {
                            Activation::Tanh => v.tanh(),
                            Activation::Relu => v.max(R::zero()),
                        })
                        .collect();
                }
                crate::num::dot(out_weights, &h) + *out_bias
            }
        }
    }

    /// Weight tensors in canonical order (the flat layout used by training).
    pub fn weight_values(&self) -> Vec<Value<R>> {
        match &self.kind {
            ClassifierKind::Linear { weights, bias } => {
                vec![Value::vector(weights.clone()), Value::scalar(*bias)]
            }
            ClassifierKind::Mlp {
                hidden,
                out_weights,
                out_bias,
                ..
            } => {
                let mut vals = Vec::with_capacity(hidden.len() * 2 + 2);
                for layer in hidden {
                    vals.push(Value::matrix(layer.rows, layer.cols, layer.weights.clone()));
                    vals.push(Value::vector(layer.biases.clone()));
                }
                vals.push(Value::vector(out_weights.clone()));
                vals.push(Value::scalar(*out_bias));
                vals
            }
        }
    }

    /// Rebuild the classifier from tensors in canonical order.
    pub fn with_weight_values(&self, vals: &[Value<R>]) -> Self {
        let mut out = self.clone();
        match &mut out.kind {
            ClassifierKind::Linear { weights, bias } => {
                *weights = vals[0].data.clone();
                *bias = vals[1].as_scalar();
            }
            ClassifierKind::Mlp {
                hidden,
                out_weights,
                out_bias,
                ..
            } => {
                for (k, layer) in hidden.iter_mut().enumerate() {
                    layer.weights = vals[2 * k].data.clone();
                    layer.biases = vals[2 * k + 1].data.clone();
                }
                *out_weights = vals[vals.len() - 2].data.clone();
                *out_bias = vals[vals.len() - 1].as_scalar();
            }
        }
        out
    }

    pub fn params_flat(&self) -> Vec<R> {
        self.weight_values()
            .into_iter()
            .flat_map(|v| v.data)
            .collect()
    }

    /// Rebuild with parameters taken from a flat vector (canonical order).
    pub fn with_params_flat(&self, flat: &[R]) -> Self {
        let mut vals = self.weight_values();
        let mut offset = 0;
        for v in vals.iter_mut() {
            let len = v.data.len();
            v.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        debug_assert_eq!(offset, flat.len());
        self.with_weight_values(&vals)
    }

    /// Pre-sigmoid margin built from explicit weight nodes (leaves during
    /// training, constants otherwise), in the canonical tensor order.
    pub fn margin_from_nodes(
        &self,
        tape: &mut Tape<R>,
        weights: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let x = match &self.feature_mask {
            Some(m) => {
                let mc = tape.constant_vector(m);
                tape.mul(x, mc)?
            }
            None => x,
        };
        match &self.kind {
            ClassifierKind::Linear { .. } => {
                let d = tape.dot(weights[0], x)?;
                tape.add(d, weights[1])
            }
            ClassifierKind::Mlp {
                hidden, activation, ..
            } => {
                let mut h = x;
                for k in 0..hidden.len() {
                    let z = tape.matvec(weights[2 * k], h)?;
                    let z = tape.add(z, weights[2 * k + 1])?;
                    h = match activation {
                        Activation::Tanh => tape.tanh(z),
                        Activation::Relu => tape.relu(z),
                    };
                }
                let d = tape.dot(weights[weights.len() - 2], h)?;
                tape.add(d, weights[weights.len() - 1])
            }
        }
    }

    /// Sigmoid score from explicit weight nodes.
    pub fn forward_from_nodes(
        &self,
        tape: &mut Tape<R>,
        weights: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let z = self.margin_from_nodes(tape, weights, x)?;
        Ok(tape.sigmoid(z))
    }

    pub fn spawn_constant_weights(&self, tape: &mut Tape<R>) -> Vec<NodeId> {
        self.weight_values()
            .into_iter()
            .map(|v| tape.constant(v))
            .collect()
    }

    pub fn spawn_weight_leaves(&self, tape: &mut Tape<R>) -> Vec<NodeId> {
        self.weight_values()
            .into_iter()
            .map(|v| tape.leaf(v))
            .collect()
    }

    // ---- persistence ----

    pub fn to_file(&self) -> ModelFile {
        let f64s = |v: &[R]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<f64>>();
        let kind = match &self.kind {
            ClassifierKind::Linear { weights, bias } => ModelKindFile::Linear {
                weights: f64s(weights),
                bias: bias.to_f64().unwrap(),
            },
            ClassifierKind::Mlp {
                hidden,
                activation,
                out_weights,
                out_bias,
            } => ModelKindFile::Mlp {
                hidden: hidden
                    .iter()
                    .map(|l| LayerFile {
                        rows: l.rows,
                        cols: l.cols,
                        weights: f64s(&l.weights),
                        biases: f64s(&l.biases),
                    })
                    .collect(),
                activation: *activation,
                out_weights: f64s(out_weights),
                out_bias: out_bias.to_f64().unwrap(),
            },
        };
        ModelFile {
            n_features: self.n_features,
            kind,
            threshold: self.threshold.to_f64().unwrap(),
            feature_mask: self.feature_mask.as_ref().map(|m| f64s(m)),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self, ModelError> {
        let reals = |v: Vec<f64>| v.into_iter().map(real).collect::<Vec<R>>();
        let threshold = real::<R>(file.threshold);
        let mut c = match file.kind {
            ModelKindFile::Linear { weights, bias } => {
                let c = Classifier::new_linear(reals(weights), real(bias), threshold)?;
                if c.n_features != file.n_features {
                    return Err(ModelError::MalformedFile(format!(
                        "linear weights disagree with n_features = {}",
                        file.n_features
                    )));
                }
                c
            }
            ModelKindFile::Mlp {
                hidden,
                activation,
                out_weights,
                out_bias,
            } => {
                let mut layers = Vec::with_capacity(hidden.len());
                for l in hidden {
                    if l.weights.len() != l.rows * l.cols || l.biases.len() != l.rows {
                        return Err(ModelError::MalformedFile(
                            "layer shape disagrees with data length".into(),
                        ));
                    }
                    layers.push(Layer {
                        rows: l.rows,
                        cols: l.cols,
                        weights: reals(l.weights),
                        biases: reals(l.biases),
                    });
                }
                Classifier::new_mlp(
                    file.n_features,
                    layers,
                    activation,
                    reals(out_weights),
                    real(out_bias),
                    threshold,
                )?
            }
        };
        if let Some(mask) = file.feature_mask {
            c = c.with_mask(reals(mask))?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Classifier::from_file(serde_json::from_str(&text)?)
    }
}

fn check_threshold<R: Real>(b: R) -> Result<(), ModelError> {
    if b > R::zero() && b < R::one() {
        Ok(())
    } else {
        Err(ModelError::BadThreshold(b.to_f64().unwrap_or(f64::NAN)))
    }
}

impl<R: Real> Scorer<R> for Classifier<R> {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn threshold(&self) -> R {
        self.threshold
    }

    fn score(&self, x: &[R]) -> R {
        sigmoid(self.margin(x))
    }

    fn score_node(&self, tape: &mut Tape<R>, x: NodeId) -> Result<NodeId, AutodiffError> {
        let weights = self.spawn_constant_weights(tape);
        self.forward_from_nodes(tape, &weights, x)
    }

    fn linear_halfspace(&self) -> Option<(Vec<R>, R)> {
        match &self.kind {
            ClassifierKind::Linear { weights, bias } => {
                let w = match &self.feature_mask {
                    Some(m) => weights.iter().zip(m).map(|(&w, &mm)| w * mm).collect(),
                    None => weights.clone(),
                };
                Some((w, logit(self.threshold) - *bias))
            }
            ClassifierKind::Mlp { .. } => None,
        }
    }
}

/// Pathological benchmark classifier: the decision regions are periodic
/// stripes in the second feature, `h~(x) = sigmoid(sin(2 pi x_2 / period))`
/// with threshold 1/2. Standard recourse exists everywhere, but no action
/// survives an uncertainty radius larger than the stripe period.
#[derive(Debug, Clone)]
pub struct SineStripeClassifier<R> {
    pub n_features: usize,
    pub period: R,
}

impl<R: Real> SineStripeClassifier<R> {
    pub fn new(n_features: usize, period: R) -> Self {
        assert!(n_features >= 2 && period > R::zero());
        SineStripeClassifier { n_features, period }
    }

    fn angular(&self) -> R {
        real::<R>(2.0 * std::f64::consts::PI) / self.period
    }
}

impl<R: Real> Scorer<R> for SineStripeClassifier<R> {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn threshold(&self) -> R {
        real(0.5)
    }

    fn score(&self, x: &[R]) -> R {
        sigmoid((x[1] * self.angular()).sin())
    }

    fn score_node(&self, tape: &mut Tape<R>, x: NodeId) -> Result<NodeId, AutodiffError> {
        let x2 = tape.index(x, 1)?;
        let scaled = tape.scale(x2, self.angular());
        let s = tape.sin(scaled);
        Ok(tape.sigmoid(s))
    }
}

/// 0/1 mask over actionable features; `complement` gives the unactionable
/// mask, and the two always sum to all-ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionabilityMask<R> {
    actionable: Vec<R>,
}

impl<R: Real> ActionabilityMask<R> {
    pub fn new(actionable: Vec<R>) -> Result<Self, ModelError> {
        if !actionable.iter().all(|&m| m == R::zero() || m == R::one()) {
            return Err(ModelError::MaskEntries);
        }
        Ok(ActionabilityMask { actionable })
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        ActionabilityMask {
            actionable: flags
                .iter()
                .map(|&f| if f { R::one() } else { R::zero() })
                .collect(),
        }
    }

    pub fn from_feasibility(spec: &crate::recourse::FeasibilitySpec) -> Self {
        ActionabilityMask {
            actionable: spec.actionable_mask(),
        }
    }

    pub fn actionable(&self) -> &[R] {
        &self.actionable
    }

    pub fn complement(&self) -> Vec<R> {
        self.actionable.iter().map(|&m| R::one() - m).collect()
    }

    pub fn len(&self) -> usize {
        self.actionable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actionable.is_empty()
    }
}

/// Architecture to train.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Linear,
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
}

impl ModelSpec {
    /// Two tanh hidden layers of 32 units.
    pub fn default_mlp() -> Self {
        ModelSpec::Mlp {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
        }
    }
}

/// Training objective. Regularization strengths are nonnegative.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    Erm,
    /// ERM with unactionable inputs zeroed.
    Af,
    Allr {
        mu1: f64,
        mu2: f64,
        eps_reg: f64,
    },
    Ross {
        mu: f64,
        #[serde(default = "default_inner_steps")]
        steps: usize,
    },
}

fn default_inner_steps() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ModelSpec,
    pub objective: Objective,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    100
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(ModelError::BadConfig("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ModelError::BadConfig("learning rate must be > 0".into()));
        }
        match &self.objective {
            Objective::Allr { mu1, mu2, eps_reg } => {
                if *mu1 < 0.0 || *mu2 < 0.0 {
                    return Err(ModelError::BadConfig("ALLR strengths must be >= 0".into()));
                }
                if !(*eps_reg > 0.0) {
                    return Err(ModelError::BadConfig("ALLR eps_reg must be > 0".into()));
                }
            }
            Objective::Ross { mu, steps } => {
                if *mu < 0.0 {
                    return Err(ModelError::BadConfig("Ross mu must be >= 0".into()));
                }
                if *steps == 0 {
                    return Err(ModelError::BadConfig("Ross steps must be >= 1".into()));
                }
            }
            Objective::Erm | Objective::Af => {}
        }
        Ok(())
    }
}

/// Per-epoch traces from a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub penalty_trace: Vec<f64>,
}

const STENCIL_STEP: f64 = 1e-4;

/// Adam optimizer state over a flat parameter vector.
struct Adam<R> {
    m: Vec<R>,
    v: Vec<R>,
    t: i32,
    lr: R,
}

impl<R: Real> Adam<R> {
    fn new(dim: usize, lr: R) -> Self {
        Adam {
            m: vec![R::zero(); dim],
            v: vec![R::zero(); dim],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [R], grad: &[R]) {
        let b1 = real::<R>(0.9);
        let b2 = real::<R>(0.999);
        let eps = real::<R>(1e-8);
        self.t += 1;
        let bc1 = R::one() - b1.powi(self.t);
        let bc2 = R::one() - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (R::one() - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (R::one() - b2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

fn init_classifier<R: Real>(
    spec: &ModelSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Classifier<R>, ModelError> {
    let half = real::<R>(0.5);
    match spec {
        ModelSpec::Linear => {
            let s = 1.0 / (n as f64).sqrt();
            let w: Vec<R> = (0..n).map(|_| real(rng.gen_range(-s..s))).collect();
            Classifier::new_linear(w, R::zero(), half)
        }
        ModelSpec::Mlp { hidden, activation } => {
            let mut layers = Vec::with_capacity(hidden.len());
            let mut fan_in = n;
            for &width in hidden {
                let s = 1.0 / (fan_in as f64).sqrt();
                layers.push(Layer {
                    rows: width,
                    cols: fan_in,
                    weights: (0..width * fan_in)
                        .map(|_| real(rng.gen_range(-s..s)))
                        .collect(),
                    biases: vec![R::zero(); width],
                });
                fan_in = width;
            }
            let s = 1.0 / (fan_in as f64).sqrt();
            let out: Vec<R> = (0..fan_in).map(|_| real(rng.gen_range(-s..s))).collect();
            Classifier::new_mlp(n, layers, *activation, out, R::zero(), half)
        }
    }
}

/// Binary cross-entropy of score node `p` against label 1: `-log p`.
pub fn bce_against_one<R: Real>(tape: &mut Tape<R>, p: NodeId) -> NodeId {
    let lg = tape.log(p);
    tape.scale(lg, -R::one())
}

fn bce_node<R: Real>(tape: &mut Tape<R>, p: NodeId, y: u8) -> Result<NodeId, AutodiffError> {
    if y == 1 {
        Ok(bce_against_one(tape, p))
    } else {
        let one = tape.constant_scalar(R::one());
        let q = tape.sub(one, p)?;
        Ok(bce_against_one(tape, q))
    }
}

/// Per-sample loss node for an objective, with the inner argmax/argmin
/// points supplied by the caller (training recomputes them every batch).
#[allow(clippy::too_many_arguments)]
fn sample_loss_node<R: Real>(
    tape: &mut Tape<R>,
    classifier: &Classifier<R>,
    weight_nodes: &[NodeId],
    x: &[R],
    y: u8,
    objective: &Objective,
    mask: Option<&ActionabilityMask<R>>,
) -> Result<(NodeId, f64), ModelError> {
    let xn = tape.constant_vector(x);
    let p = classifier.forward_from_nodes(tape, weight_nodes, xn)?;
    let mut term = bce_node(tape, p, y)?;
    let mut penalty_value = 0.0f64;
    match objective {
        Objective::Erm | Objective::Af => {}
        Objective::Allr { mu1, mu2, eps_reg } => {
            if *mu1 > 0.0 || *mu2 > 0.0 {
                let m = require_mask(mask, "ALLR")?;
                let delta_star = if *mu1 > 0.0 {
                    Some(allr_inner_argmax(classifier, x, real::<R>(*eps_reg)))
                } else {
                    None
                };
                let pen = allr_penalty_node(
                    tape,
                    classifier,
                    weight_nodes,
                    x,
                    m,
                    real(*mu1),
                    real(*mu2),
                    delta_star.as_deref(),
                )?;
                penalty_value = tape.scalar(pen).to_f64().unwrap();
                term = tape.add(term, pen)?;
            }
        }
        Objective::Ross { mu, steps } => {
            if *mu > 0.0 {
                let m = require_mask(mask, "Ross")?;
                let delta_star = ross_inner_argmin(classifier, x, m, *steps);
                let pen =
                    ross_penalty_node(tape, classifier, weight_nodes, x, m, real(*mu), &delta_star)?;
                penalty_value = tape.scalar(pen).to_f64().unwrap();
                term = tape.add(term, pen)?;
            }
        }
    }
    Ok((term, penalty_value))
}

fn require_mask<'a, R: Real>(
    mask: Option<&'a ActionabilityMask<R>>,
    what: &str,
) -> Result<&'a ActionabilityMask<R>, ModelError> {
    mask.ok_or_else(|| ModelError::BadConfig(format!("{what} objective requires a mask")))
}

/// Train a classifier on the dataset. Deterministic given `config.seed`.
pub fn train<R: Real>(
    dataset: &Dataset<R>,
    config: &TrainConfig,
    mask: Option<&ActionabilityMask<R>>,
) -> Result<(Classifier<R>, TrainReport), ModelError> {
    config.validate()?;
    let (neg, pos) = dataset.class_counts();
    if neg == 0 || pos == 0 {
        return Err(ModelError::SingleClass);
    }
    let n = dataset.n_features();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(ModelError::MaskLength {
                expected: n,
                got: m.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut classifier = init_classifier::<R>(&config.arch, n, &mut rng)?;
    if matches!(config.objective, Objective::Af) {
        let m = require_mask(mask, "AF")?;
        classifier = classifier.with_mask(m.actionable().to_vec())?;
    }

    let mut params = classifier.params_flat();
    let mut adam = Adam::new(params.len(), real::<R>(config.lr));
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut penalty_trace = Vec::with_capacity(config.epochs);

    let rows = dataset.n_rows();
    let mut order: Vec<usize> = (0..rows).collect();

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_penalty = 0.0f64;

        for chunk in order.chunks(config.batch) {
            classifier = classifier.with_params_flat(&params);
            let mut tape = Tape::new();
            let weight_nodes = classifier.spawn_weight_leaves(&mut tape);
            let mut batch_terms: Vec<NodeId> = Vec::with_capacity(chunk.len());

            for &i in chunk {
                let (term, pen) = sample_loss_node(
                    &mut tape,
                    &classifier,
                    &weight_nodes,
                    &dataset.features[i],
                    dataset.labels[i],
                    &config.objective,
                    mask,
                )?;
                epoch_penalty += pen;
                batch_terms.push(term);
            }

            let mut total = batch_terms[0];
            for &t in &batch_terms[1..] {
                total = tape.add(total, t)?;
            }
            let mean = tape.scale(total, R::one() / real::<R>(chunk.len() as f64));
            epoch_loss += tape.scalar(mean).to_f64().unwrap() * chunk.len() as f64;

            let grads = tape.gradient(mean, &weight_nodes)?;
            let flat: Vec<R> = grads.into_iter().flat_map(|g| g.data).collect();
            adam.step(&mut params, &flat);
        }

        loss_trace.push(epoch_loss / rows as f64);
        penalty_trace.push(epoch_penalty / rows as f64);
    }

    classifier = classifier.with_params_flat(&params);
    Ok((
        classifier,
        TrainReport {
            loss_trace,
            penalty_trace,
        },
    ))
}

/// Central-difference input gradient of the pre-sigmoid margin, no tape.
fn margin_stencil_plain<R: Real>(classifier: &Classifier<R>, x: &[R], step: R) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    let mut probe = x.to_vec();
    let half = R::one() / (real::<R>(2.0) * step);
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = classifier.margin(&probe);
        probe[i] = x[i] - step;
        let minus = classifier.margin(&probe);
        probe[i] = x[i];
        out[i] = (plus - minus) * half;
    }
    out
}

/// Actionable local-linearity penalty as a tape node, differentiable in the
/// classifier weights:
///
/// `mu1 * |z(x + d*) - <d*, g(x)> - z(x)| + mu2 * ||m_unact ⊙ g(x)||_2`
///
/// where `z` is the pre-sigmoid margin, `g(x)` its finite-difference
/// stencil, and `d*` the inner maximizer over the `eps_reg` ball (envelope
/// approximation: `d*` enters as a constant). Pass `delta_star: None` when
/// `mu1 = 0`.
#[allow(clippy::too_many_arguments)]
pub fn allr_penalty_node<R: Real>(
    tape: &mut Tape<R>,
    classifier: &Classifier<R>,
    weight_nodes: &[NodeId],
    x: &[R],
    mask: &ActionabilityMask<R>,
    mu1: R,
    mu2: R,
    delta_star: Option<&[R]>,
) -> Result<NodeId, ModelError> {
    let step = real::<R>(STENCIL_STEP);
    let stencil = input_gradient_stencil(
        tape,
        |t, input| {
            let xn = t.constant_vector(input);
            classifier.margin_from_nodes(t, weight_nodes, xn)
        },
        x,
        step,
    )?;

    let mut penalty: Option<NodeId> = None;

    if mu1 > R::zero() {
        let delta = delta_star.expect("mu1 > 0 requires the inner maximizer");
        let xd: Vec<R> = x.iter().zip(delta).map(|(&a, &d)| a + d).collect();
        let xdn = tape.constant_vector(&xd);
        let z_shift = classifier.margin_from_nodes(tape, weight_nodes, xdn)?;
        let xn = tape.constant_vector(x);
        let z0 = classifier.margin_from_nodes(tape, weight_nodes, xn)?;
        let dn = tape.constant_vector(delta);
        let lin = tape.dot(dn, stencil)?;
        let r = tape.sub(z_shift, lin)?;
        let r = tape.sub(r, z0)?;
        let a = tape.abs(r);
        penalty = Some(tape.scale(a, mu1));
    }

    if mu2 > R::zero() {
        let unact = tape.constant_vector(&mask.complement());
        let masked = tape.mul(unact, stencil)?;
        let nrm = tape.norm(masked, 2)?;
        let term = tape.scale(nrm, mu2);
        penalty = Some(match penalty {
            Some(p) => tape.add(p, term)?,
            None => term,
        });
    }

    Ok(penalty.unwrap_or_else(|| tape.constant_scalar(R::zero())))
}

/// Penalty value for a fixed classifier (weights enter as constants; the
/// inner maximizer is computed here).
pub fn allr_penalty<R: Real>(
    classifier: &Classifier<R>,
    x: &[R],
    mask: &ActionabilityMask<R>,
    mu1: R,
    mu2: R,
    eps_reg: R,
) -> Result<R, ModelError> {
    let mut tape = Tape::new();
    let weights = classifier.spawn_constant_weights(&mut tape);
    let delta_star = if mu1 > R::zero() {
        Some(allr_inner_argmax(classifier, x, eps_reg))
    } else {
        None
    };
    let node = allr_penalty_node(
        &mut tape,
        classifier,
        &weights,
        x,
        mask,
        mu1,
        mu2,
        delta_star.as_deref(),
    )?;
    Ok(tape.scalar(node))
}

/// Projected gradient ascent for the local-linearity residual
/// `|z(x+delta) - <delta, g0> - z(x)|` over the eps ball: 10 steps of size
/// eps/4, initialized along the stencil direction (the residual's gradient
/// vanishes exactly at delta = 0).
pub fn allr_inner_argmax<R: Real>(classifier: &Classifier<R>, x: &[R], eps: R) -> Vec<R> {
    let n = x.len();
    let step = real::<R>(STENCIL_STEP);
    let g0 = margin_stencil_plain(classifier, x, step);
    let z0 = classifier.margin(x);

    let mut delta = {
        let norm = norm2(&g0);
        let half = eps / real::<R>(2.0);
        if norm > R::zero() {
            g0.iter().map(|&g| g / norm * half).collect::<Vec<R>>()
        } else {
            let mut d = vec![R::zero(); n];
            d[0] = half;
            d
        }
    };

    let mut tape = Tape::new();
    let dn = tape.leaf_vector(&delta);
    let xn = tape.constant_vector(x);
    let xd = tape.add(xn, dn).expect("same length");
    let weights = classifier.spawn_constant_weights(&mut tape);
    let z = classifier
        .margin_from_nodes(&mut tape, &weights, xd)
        .expect("forward");
    let g0n = tape.constant_vector(&g0);
    let lin = tape.dot(g0n, dn).expect("dot");
    let z0n = tape.constant_scalar(z0);
    let r = tape.sub(z, lin).expect("sub");
    let r = tape.sub(r, z0n).expect("sub");
    let root = tape.abs(r);

    let pga_step = eps / real::<R>(4.0);
    let mut best = (tape.scalar(root), delta.clone());
    for _ in 0..10 {
        let grad = tape.gradient(root, &[dn]).expect("gradient");
        for (d, g) in delta.iter_mut().zip(&grad[0].data) {
            *d += pga_step * *g;
        }
        project_l2_ball(&mut delta, eps);
        tape.set_input(dn, &delta).expect("set delta");
        tape.replay();
        let val = tape.scalar(root);
        if val > best.0 {
            best = (val, delta.clone());
        }
    }
    best.1
}

/// Recourse-existence penalty: `mu * bce(h(x + m_A ⊙ delta*), 1)` with
/// `delta*` treated as constant under weight differentiation.
pub fn ross_penalty_node<R: Real>(
    tape: &mut Tape<R>,
    classifier: &Classifier<R>,
    weight_nodes: &[NodeId],
    x: &[R],
    mask: &ActionabilityMask<R>,
    mu: R,
    delta_star: &[R],
) -> Result<NodeId, ModelError> {
    let shifted: Vec<R> = x
        .iter()
        .zip(mask.actionable())
        .zip(delta_star)
        .map(|((&a, &m), &d)| a + m * d)
        .collect();
    let xn = tape.constant_vector(&shifted);
    let p = classifier.forward_from_nodes(tape, weight_nodes, xn)?;
    let loss = bce_against_one(tape, p);
    Ok(tape.scale(loss, mu))
}

/// Penalty value for a fixed classifier (computes the inner minimizer).
pub fn ross_penalty<R: Real>(
    classifier: &Classifier<R>,
    x: &[R],
    mask: &ActionabilityMask<R>,
    mu: R,
    steps: usize,
) -> Result<R, ModelError> {
    if mu == R::zero() {
        return Ok(R::zero());
    }
    let mut tape = Tape::new();
    let weights = classifier.spawn_constant_weights(&mut tape);
    let delta_star = ross_inner_argmin(classifier, x, mask, steps);
    let node = ross_penalty_node(&mut tape, classifier, &weights, x, mask, mu, &delta_star)?;
    Ok(tape.scalar(node))
}

const ROSS_INNER_STEP: f64 = 0.1;

/// Gradient descent on `bce(h(x + m_A ⊙ delta), 1)` over delta, returning
/// the best iterate (delta = 0 included).
pub fn ross_inner_argmin<R: Real>(
    classifier: &Classifier<R>,
    x: &[R],
    mask: &ActionabilityMask<R>,
    steps: usize,
) -> Vec<R> {
    let mut delta = vec![R::zero(); x.len()];
    let mut tape = Tape::new();
    let dn = tape.leaf_vector(&delta);
    let mn = tape.constant_vector(mask.actionable());
    let move_n = tape.mul(dn, mn).expect("mask");
    let xn = tape.constant_vector(x);
    let xd = tape.add(xn, move_n).expect("shift");
    let weights = classifier.spawn_constant_weights(&mut tape);
    let p = classifier
        .forward_from_nodes(&mut tape, &weights, xd)
        .expect("forward");
    let root = bce_against_one(&mut tape, p);

    let step = real::<R>(ROSS_INNER_STEP);
    let mut best = (tape.scalar(root), delta.clone());
    for _ in 0..steps {
        let grad = tape.gradient(root, &[dn]).expect("gradient");
        for (d, g) in delta.iter_mut().zip(&grad[0].data) {
            *d -= step * *g;
        }
        tape.set_input(dn, &delta).expect("set delta");
        tape.replay();
        let val = tape.scalar(root);
        if val < best.0 {
            best = (val, delta.clone());
        }
    }
    best.1
}

// ---- evaluation metrics ----

/// Matthews correlation coefficient; 0/0 is defined as 0.
pub fn mcc(tp: usize, fp: usize, tn: usize, fn_: usize) -> f64 {
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / denom
    }
}

pub fn accuracy<R: Real, S: Scorer<R>>(scorer: &S, x: &[Vec<R>], y: &[u8]) -> f64 {
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| u8::from(scorer.decide(xi)) == yi)
        .count();
    correct as f64 / x.len() as f64
}

pub fn mcc_at_threshold<R: Real>(scores: &[R], y: &[u8], b: R) -> f64 {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &yi) in scores.iter().zip(y) {
        match (s >= b, yi == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    mcc(tp, fp, tn, fn_)
}

/// Pick the decision threshold maximizing MCC on a validation set.
/// Candidates are the midpoints of consecutive distinct scores; ties break
/// toward the larger threshold.
pub fn select_threshold<R: Real, S: Scorer<R>>(
    scorer: &S,
    x: &[Vec<R>],
    y: &[u8],
) -> Result<R, ModelError> {
    let scores: Vec<R> = x.iter().map(|xi| scorer.score(xi)).collect();
    select_threshold_from_scores(&scores, y)
}

pub fn select_threshold_from_scores<R: Real>(scores: &[R], y: &[u8]) -> Result<R, ModelError> {
    if !y.contains(&0) || !y.contains(&1) {
        return Err(ModelError::SingleClassValidation);
    }
    let mut uniq: Vec<R> = scores.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    uniq.dedup();
    let half = real::<R>(0.5);
    let candidates: Vec<R> = if uniq.len() < 2 {
        vec![uniq[0]]
    } else {
        uniq.windows(2).map(|w| (w[0] + w[1]) * half).collect()
    };
    let mut best_b = candidates[0];
    let mut best = f64::NEG_INFINITY;
    for &b in &candidates {
        let m = mcc_at_threshold(scores, y, b);
        if m >= best {
            best = m;
            best_b = b;
        }
    }
    Ok(best_b)
}

/// Serialized classifier. Weight arrays are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub n_features: usize,
    #[serde(flatten)]
    pub kind: ModelKindFile,
    pub threshold: f64,
    #[serde(default)]
    pub feature_mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKindFile {
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    Mlp {
        hidden: Vec<LayerFile>,
        activation: Activation,
        out_weights: Vec<f64>,
        out_bias: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, sep: f64, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n_per {
            features.push(vec![
                rng.gen_range(-1.0..1.0) - sep,
                rng.gen_range(-1.0..1.0),
            ]);
            labels.push(0);
            features.push(vec![
                rng.gen_range(-1.0..1.0) + sep,
                rng.gen_range(-1.0..1.0),
            ]);
            labels.push(1);
        }
        Dataset::new(features, labels, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn erm_separates_blobs() {
        let ds = blobs(100, 2.0, 3);
        let config = TrainConfig {
            arch: ModelSpec::Linear,
            objective: Objective::Erm,
            epochs: 50,
            lr: 1e-2,
            batch: 100,
            seed: 0,
        };
        let (c, report) = train(&ds, &config, None).unwrap();
        assert!(accuracy(&c, &ds.features, &ds.labels) >= 0.99);
        assert!(report.loss_trace.first().unwrap() > report.loss_trace.last().unwrap());
    }

    #[test]
    fn af_gets_majority_rate_when_signal_is_unactionable() {
        // Only feature 0 is informative, and it is unactionable.
        let ds = blobs(150, 2.0, 5);
        let mask = ActionabilityMask::from_flags(&[false, true]);
        let config = TrainConfig {
            arch: ModelSpec::Linear,
            objective: Objective::Af,
            epochs: 60,
            lr: 1e-2,
            batch: 100,
            seed: 1,
        };
        let (c, _) = train(&ds, &config, Some(&mask)).unwrap();
        let acc = accuracy(&c, &ds.features, &ds.labels);
        assert!((acc - 0.5).abs() <= 0.1, "acc = {acc}");
    }

    #[test]
    fn allr_with_zero_strengths_matches_erm_bitwise() {
        let ds = blobs(60, 1.0, 9);
        let mask = ActionabilityMask::from_flags(&[true, false]);
        let erm = TrainConfig {
            arch: ModelSpec::default_mlp(),
            objective: Objective::Erm,
            epochs: 5,
            lr: 1e-3,
            batch: 100,
            seed: 4,
        };
        let allr0 = TrainConfig {
            objective: Objective::Allr {
                mu1: 0.0,
                mu2: 0.0,
                eps_reg: 0.1,
            },
            ..erm.clone()
        };
        let (a, _) = train(&ds, &erm, Some(&mask)).unwrap();
        let (b, _) = train(&ds, &allr0, Some(&mask)).unwrap();
        let pa: Vec<u64> = a.params_flat().iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = b.params_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let ds = blobs(60, 1.0, 13);
        let mask = ActionabilityMask::from_flags(&[true, false]);
        let config = TrainConfig {
            arch: ModelSpec::default_mlp(),
            objective: Objective::Allr {
                mu1: 0.5,
                mu2: 0.1,
                eps_reg: 0.1,
            },
            epochs: 3,
            lr: 1e-3,
            batch: 50,
            seed: 21,
        };
        let (a, _) = train(&ds, &config, Some(&mask)).unwrap();
        let (b, _) = train(&ds, &config, Some(&mask)).unwrap();
        let pa: Vec<u64> = a.params_flat().iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = b.params_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let ds = Dataset::new(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![1, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let config = TrainConfig {
            arch: ModelSpec::Linear,
            objective: Objective::Erm,
            epochs: 1,
            lr: 1e-3,
            batch: 10,
            seed: 0,
        };
        assert!(matches!(
            train(&ds, &config, None),
            Err(ModelError::SingleClass)
        ));
    }

    #[test]
    fn allr_local_linearity_term_is_zero_for_linear() {
        let c = Classifier::new_linear(vec![0.8, -0.5], 0.2, 0.5).unwrap();
        let mask = ActionabilityMask::from_flags(&[true, true]);
        for x in [[0.0, 0.0], [1.0, -2.0], [0.3, 0.7]] {
            let pen = allr_penalty(&c, &x, &mask, 1.0, 0.0, 0.5).unwrap();
            assert!(pen <= 1e-6, "penalty = {pen}");
        }
    }

    #[test]
    fn allr_unactionable_term_is_zero_when_gradient_actionable_only() {
        // Classifier depends only on feature 0, which is actionable.
        let c = Classifier::new_linear(vec![0.9, 0.0], 0.0, 0.5).unwrap();
        let mask = ActionabilityMask::from_flags(&[true, false]);
        let pen = allr_penalty(&c, &[0.2, -0.4], &mask, 0.0, 1.0, 0.1).unwrap();
        assert!(pen <= 1e-9, "penalty = {pen}");
    }

    #[test]
    fn allr_pga_finds_most_of_the_grid_maximum() {
        // 2-D tanh MLP; oracle = exhaustive 100x100 grid over the ball.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let hidden = vec![Layer {
            rows: 8,
            cols: 2,
            weights: (0..16).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            biases: (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }];
        let out: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let c = Classifier::new_mlp(2, hidden, Activation::Tanh, out, 0.1, 0.5).unwrap();
        let mask = ActionabilityMask::from_flags(&[true, true]);
        let x = [0.3, -0.2];
        let eps = 0.5;

        let pga = allr_penalty(&c, &x, &mask, 1.0, 0.0, eps).unwrap();

        let g0 = margin_stencil_plain(&c, &x, 1e-4);
        let z0 = c.margin(&x);
        let mut grid_max = 0.0f64;
        for i in 0..100 {
            for j in 0..100 {
                let dx = -eps + 2.0 * eps * (i as f64) / 99.0;
                let dy = -eps + 2.0 * eps * (j as f64) / 99.0;
                if dx * dx + dy * dy > eps * eps {
                    continue;
                }
                let shifted = [x[0] + dx, x[1] + dy];
                let r = (c.margin(&shifted) - (dx * g0[0] + dy * g0[1]) - z0).abs();
                grid_max = grid_max.max(r);
            }
        }
        assert!(pga >= 0.8 * grid_max, "pga = {pga}, grid max = {grid_max}");
    }

    #[test]
    fn ross_penalty_examples() {
        let mask = ActionabilityMask::from_flags(&[true, true]);

        // Score pinned at 0.99 regardless of input: min over delta is at
        // most the value at delta = 0.
        let c = Classifier::new_linear(vec![0.0, 0.0], logit(0.99), 0.5).unwrap();
        let pen = ross_penalty(&c, &[0.0, 0.0], &mask, 1.0, 10).unwrap();
        assert!(pen <= -(0.99f64.ln()) + 1e-12);

        // All features unactionable: delta cannot move x.
        let c2: Classifier<f64> = Classifier::new_linear(vec![1.0, 1.0], 0.0, 0.5).unwrap();
        let frozen = ActionabilityMask::from_flags(&[false, false]);
        let x = [0.3, -0.8];
        let pen = ross_penalty(&c2, &x, &frozen, 1.0, 10).unwrap();
        let expect = -(c2.score(&x).ln());
        assert!((pen - expect).abs() <= 1e-12);

        // mu = 0 gives exactly zero.
        assert_eq!(ross_penalty(&c2, &x, &mask, 0.0, 10).unwrap(), 0.0);
    }

    #[test]
    fn penalties_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mask = ActionabilityMask::from_flags(&[true, false, true]);
        for _ in 0..20 {
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = Classifier::new_linear(w, rng.gen_range(-0.5..0.5), 0.5).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!(allr_penalty(&c, &x, &mask, 0.7, 0.3, 0.1).unwrap() >= 0.0);
            assert!(ross_penalty(&c, &x, &mask, 0.8, 5).unwrap() >= 0.0);
        }
    }

    #[test]
    fn threshold_selection_examples() {
        // Perfect separation: midpoint convention gives 0.5.
        let scores = [0.1, 0.2, 0.8, 0.9];
        let y = [0, 0, 1, 1];
        let b = select_threshold_from_scores(&scores, &y).unwrap();
        assert_eq!(b, 0.5);
        assert_eq!(mcc_at_threshold(&scores, &y, b), 1.0);

        // No separation: MCC = 0 everywhere, the largest candidate wins.
        let scores = [0.4, 0.4, 0.4, 0.4];
        let y = [0, 1, 0, 1];
        let b = select_threshold_from_scores(&scores, &y).unwrap();
        assert_eq!(b, 0.4);

        // Single-class validation set is an error.
        assert!(matches!(
            select_threshold_from_scores(&[0.2, 0.9], &[1, 1]),
            Err(ModelError::SingleClassValidation)
        ));
    }

    #[test]
    fn threshold_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let n = 60;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let y: Vec<u8> = scores
                .iter()
                .map(|&s| u8::from(s + rng.gen_range(-0.3..0.3) > 0.5))
                .collect();
            if !y.contains(&0) || !y.contains(&1) {
                continue;
            }
            let b = select_threshold_from_scores(&scores, &y).unwrap();
            let chosen = mcc_at_threshold(&scores, &y, b);
            let mut brute = f64::NEG_INFINITY;
            for k in 0..10_000 {
                let cand = (k as f64 + 0.5) / 10_000.0;
                brute = brute.max(mcc_at_threshold(&scores, &y, cand));
            }
            assert!(chosen >= brute - 1e-12, "chosen {chosen} vs brute {brute}");
            assert!(b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn mcc_stays_in_range() {
        assert_eq!(mcc(0, 0, 0, 0), 0.0);
        assert_eq!(mcc(5, 0, 5, 0), 1.0);
        assert_eq!(mcc(0, 5, 0, 5), -1.0);
        assert!(mcc(3, 2, 4, 1).abs() <= 1.0);
    }

    #[test]
    fn model_file_roundtrip_is_bit_exact() {
        let ds = blobs(40, 1.5, 17);
        let config = TrainConfig {
            arch: ModelSpec::Mlp {
                hidden: vec![6, 4],
                activation: Activation::Tanh,
            },
            objective: Objective::Erm,
            epochs: 3,
            lr: 1e-3,
            batch: 32,
            seed: 2,
        };
        let (mut c, _) = train(&ds, &config, None).unwrap();
        c.set_threshold(0.37).unwrap();
        let json = serde_json::to_string(&c.to_file()).unwrap();
        let back: Classifier<f64> =
            Classifier::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        let json2 = serde_json::to_string(&back.to_file()).unwrap();
        assert_eq!(json, json2);
        let pa: Vec<u64> = c.params_flat().iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = back.params_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pa, pb);
        assert_eq!(back.threshold(), 0.37);
    }

    #[test]
    fn linear_halfspace_accounts_for_mask_and_threshold() {
        let c: Classifier<f64> = Classifier::new_linear(vec![2.0, -1.0], 0.3, 0.7)
            .unwrap()
            .with_mask(vec![1.0, 0.0])
            .unwrap();
        let (w, b_tilde) = c.linear_halfspace().unwrap();
        assert_eq!(w, vec![2.0, 0.0]);
        assert!((b_tilde - (logit(0.7) - 0.3)).abs() < 1e-12);
        // Decision agrees with the halfspace form.
        for x in [[0.1, 5.0], [0.7, -3.0], [-0.2, 0.0]] {
            let lhs = c.decide(&x);
            let rhs = crate::num::dot(&w, &x) >= b_tilde;
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn sine_stripe_classifier_scores_and_differentiates() {
        let s = SineStripeClassifier::<f64>::new(2, 0.3);
        // Positive stripe at x2 slightly above 0.
        assert!(s.decide(&[0.0, 0.05]));
        assert!(!s.decide(&[0.0, -0.05]));

        let mut tape = Tape::new();
        let x = tape.leaf_vector(&[0.0, 0.04]);
        let p = s.score_node(&mut tape, x).unwrap();
        assert!((tape.scalar(p) - s.score(&[0.0, 0.04])).abs() < 1e-15);
        let g = tape.gradient(p, &[x]).unwrap();
        assert_eq!(g[0].data[0], 0.0);
        assert!(g[0].data[1].abs() > 0.1);
    }

    #[test]
    fn training_losses_match_finite_differences() {
        // End-to-end gradient check for each objective's per-sample loss
        // with respect to the weights. The inner argmax/argmin points are
        // computed once and held fixed, matching what the implementation
        // differentiates.
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mask = ActionabilityMask::from_flags(&[true, false]);
        for _ in 0..20 {
            let hidden = vec![Layer {
                rows: 4,
                cols: 2,
                weights: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                biases: (0..4).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            }];
            let out: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = Classifier::new_mlp(2, hidden, Activation::Tanh, out, 0.0, 0.5).unwrap();
            let x = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let y = u8::from(rng.gen_bool(0.5));

            let allr_delta = allr_inner_argmax(&c, &x, 0.1);
            let ross_delta = ross_inner_argmin(&c, &x, &mask, 5);

            #[derive(Clone, Copy)]
            enum Obj {
                Erm,
                Allr,
                Ross,
            }

            for obj in [Obj::Erm, Obj::Allr, Obj::Ross] {
                let loss_and_grad = |params: &[f64],
                                     want_grad: bool|
                 -> (f64, Option<Vec<f64>>) {
                    let c = c.with_params_flat(params);
                    let mut tape = Tape::new();
                    let weights = c.spawn_weight_leaves(&mut tape);
                    let xn = tape.constant_vector(&x);
                    let p = c.forward_from_nodes(&mut tape, &weights, xn).unwrap();
                    let mut term = bce_node(&mut tape, p, y).unwrap();
                    match obj {
                        Obj::Erm => {}
                        Obj::Allr => {
                            let pen = allr_penalty_node(
                                &mut tape,
                                &c,
                                &weights,
                                &x,
                                &mask,
                                0.5,
                                0.3,
                                Some(&allr_delta),
                            )
                            .unwrap();
                            term = tape.add(term, pen).unwrap();
                        }
                        Obj::Ross => {
                            let pen = ross_penalty_node(
                                &mut tape, &c, &weights, &x, &mask, 0.8, &ross_delta,
                            )
                            .unwrap();
                            term = tape.add(term, pen).unwrap();
                        }
                    }
                    let value = tape.scalar(term);
                    let grad = want_grad.then(|| {
                        tape.gradient(term, &weights)
                            .unwrap()
                            .into_iter()
                            .flat_map(|v| v.data)
                            .collect()
                    });
                    (value, grad)
                };

                let params = c.params_flat();
                let (_, grad) = loss_and_grad(&params, true);
                let grad = grad.unwrap();

                let h = 1e-5;
                let mut max_err = 0.0f64;
                let mut scale = 1.0f64;
                for k in 0..params.len() {
                    let mut hi = params.clone();
                    hi[k] += h;
                    let mut lo = params.clone();
                    lo[k] -= h;
                    let fd = (loss_and_grad(&hi, false).0 - loss_and_grad(&lo, false).0)
                        / (2.0 * h);
                    max_err = max_err.max((grad[k] - fd).abs());
                    scale = scale.max(fd.abs());
                }
                assert!(max_err / scale <= 1e-4, "rel err {}", max_err / scale);
            }
        }
    }
}
