//! Structural causal models with additive exogenous noise.
//!
//! Every feature is generated as `x_i = f_i(x_pa(i)) + u_i` over a DAG, so
//! abduction is the residual `u_i = x_i - f_i(x_pa(i))` and counterfactuals
//! are exact: recover `u`, swap in the intervened structural equations, and
//! re-propagate. Two intervention kinds are supported: hard interventions
//! (sever the mechanism of each target and pin its value) and additive
//! interventions (shift every mechanism output while keeping all causal
//! links), which is the perturbation model behind the uncertainty sets used
//! by the robust solvers.
//!
//! An `Scm` is immutable after construction and all operations are pure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::num::{real, Real};
use crate::recourse::RecourseAction;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("causal graph has a cycle involving feature {0}")]
    Cyclic(usize),
    #[error("feature {feature}: parent index {parent} out of range (n = {n})")]
    ParentOutOfRange {
        feature: usize,
        parent: usize,
        n: usize,
    },
    #[error("feature {feature}: {weights} weights for {parents} parents")]
    WeightCount {
        feature: usize,
        weights: usize,
        parents: usize,
    },
    #[error("feature {feature}: expression references parent slot {slot}, but only {parents} parents")]
    ExprVarOutOfRange {
        feature: usize,
        slot: usize,
        parents: usize,
    },
    #[error("feature {feature}: non-finite parameter in mechanism")]
    NonFiniteParameter { feature: usize },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input at feature {0}")]
    NonFiniteInput(usize),
    #[error("mechanism for feature {0} produced a non-finite value")]
    NonFiniteMechanism(usize),
    #[error("field count mismatch in SCM definition: {0}")]
    MalformedDefinition(String),
    #[error("unknown builtin SCM `{0}`")]
    UnknownBuiltin(String),
    #[error("intervened feature {0} out of range")]
    InterventionOutOfRange(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Expression tree for nonlinear mechanisms. `Var` indexes into the owning
/// feature's parent list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Expr {
    Var { index: usize },
    Const { value: f64 },
    Add { lhs: Box<Expr>, rhs: Box<Expr> },
    Sub { lhs: Box<Expr>, rhs: Box<Expr> },
    Mul { lhs: Box<Expr>, rhs: Box<Expr> },
    Square { arg: Box<Expr> },
    Tanh { arg: Box<Expr> },
}

impl Expr {
    fn eval<R: Real>(&self, parents: &[R]) -> R {
        match self {
            Expr::Var { index } => parents[*index],
            Expr::Const { value } => real(*value),
            Expr::Add { lhs, rhs } => lhs.eval(parents) + rhs.eval(parents),
            Expr::Sub { lhs, rhs } => lhs.eval(parents) - rhs.eval(parents),
            Expr::Mul { lhs, rhs } => lhs.eval(parents) * rhs.eval(parents),
            Expr::Square { arg } => {
                let v = arg.eval(parents);
                v * v
            }
            Expr::Tanh { arg } => arg.eval(parents).tanh(),
        }
    }

    fn node<R: Real>(
        &self,
        tape: &mut Tape<R>,
        parents: &[NodeId],
    ) -> Result<NodeId, AutodiffError> {
        Ok(match self {
            Expr::Var { index } => parents[*index],
            Expr::Const { value } => tape.constant_scalar(real(*value)),
            Expr::Add { lhs, rhs } => {
                let a = lhs.node(tape, parents)?;
                let b = rhs.node(tape, parents)?;
                tape.add(a, b)?
            }
            Expr::Sub { lhs, rhs } => {
                let a = lhs.node(tape, parents)?;
                let b = rhs.node(tape, parents)?;
                tape.sub(a, b)?
            }
            Expr::Mul { lhs, rhs } => {
                let a = lhs.node(tape, parents)?;
                let b = rhs.node(tape, parents)?;
                tape.mul(a, b)?
            }
            Expr::Square { arg } => {
                let a = arg.node(tape, parents)?;
                tape.square(a)
            }
            Expr::Tanh { arg } => {
                let a = arg.node(tape, parents)?;
                tape.tanh(a)
            }
        })
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Var { index } => Some(*index),
            Expr::Const { .. } => None,
            Expr::Add { lhs, rhs } | Expr::Sub { lhs, rhs } | Expr::Mul { lhs, rhs } => {
                lhs.max_var().max(rhs.max_var())
            }
            Expr::Square { arg } | Expr::Tanh { arg } => arg.max_var(),
        }
    }

    fn finite(&self) -> bool {
        match self {
            Expr::Var { .. } => true,
            Expr::Const { value } => value.is_finite(),
            Expr::Add { lhs, rhs } | Expr::Sub { lhs, rhs } | Expr::Mul { lhs, rhs } => {
                lhs.finite() && rhs.finite()
            }
            Expr::Square { arg } | Expr::Tanh { arg } => arg.finite(),
        }
    }
}

/// Deterministic part of one structural equation; exogenous noise is always
/// added on top, which is what keeps abduction exact.
#[derive(Debug, Clone)]
pub enum Mechanism<R> {
    Linear { weights: Vec<R>, bias: R },
    Nonlinear { expr: Expr, bias: R },
}

impl<R: Real> Mechanism<R> {
    // Same accumulation order as `node` so plain and tape evaluation agree
    // bit for bit.
    fn eval(&self, parents: &[R]) -> R {
        match self {
            Mechanism::Linear { weights, bias } => {
                let mut acc = *bias;
                for (&w, &p) in weights.iter().zip(parents) {
                    acc = acc + p * w;
                }
                acc
            }
            Mechanism::Nonlinear { expr, bias } => expr.eval(parents) + *bias,
        }
    }

    fn node(&self, tape: &mut Tape<R>, parents: &[NodeId]) -> Result<NodeId, AutodiffError> {
        match self {
            Mechanism::Linear { weights, bias } => {
                let mut acc = tape.constant_scalar(*bias);
                for (&w, &p) in weights.iter().zip(parents) {
                    let term = tape.scale(p, w);
                    acc = tape.add(acc, term)?;
                }
                Ok(acc)
            }
            Mechanism::Nonlinear { expr, bias } => {
                let e = expr.node(tape, parents)?;
                let b = tape.constant_scalar(*bias);
                tape.add(e, b)
            }
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Mechanism::Linear { .. })
    }
}

/// Additive-noise structural causal model over a feature DAG.
#[derive(Debug, Clone)]
pub struct Scm<R> {
    n: usize,
    parents: Vec<Vec<usize>>,
    mechanisms: Vec<Mechanism<R>>,
    feature_names: Vec<String>,
    topo_order: Vec<usize>,
}

impl<R: Real> Scm<R> {
    pub fn new(
        parents: Vec<Vec<usize>>,
        mechanisms: Vec<Mechanism<R>>,
        feature_names: Vec<String>,
    ) -> Result<Self, ScmError> {
        let n = parents.len();
        if mechanisms.len() != n || feature_names.len() != n {
            return Err(ScmError::MalformedDefinition(format!(
                "{n} parent lists, {} mechanisms, {} names",
                mechanisms.len(),
                feature_names.len()
            )));
        }
        for (i, pa) in parents.iter().enumerate() {
            for &p in pa {
                if p >= n {
                    return Err(ScmError::ParentOutOfRange {
                        feature: i,
                        parent: p,
                        n,
                    });
                }
            }
            match &mechanisms[i] {
                Mechanism::Linear { weights, bias } => {
                    if weights.len() != pa.len() {
                        return Err(ScmError::WeightCount {
                            feature: i,
                            weights: weights.len(),
                            parents: pa.len(),
                        });
                    }
                    if !weights.iter().all(|w| w.is_finite()) || !bias.is_finite() {
                        return Err(ScmError::NonFiniteParameter { feature: i });
                    }
                }
                Mechanism::Nonlinear { expr, bias } => {
                    if let Some(v) = expr.max_var() {
                        if v >= pa.len() {
                            return Err(ScmError::ExprVarOutOfRange {
                                feature: i,
                                slot: v,
                                parents: pa.len(),
                            });
                        }
                    }
                    if !expr.finite() || !bias.is_finite() {
                        return Err(ScmError::NonFiniteParameter { feature: i });
                    }
                }
            }
        }
        let topo_order = toposort(&parents)?;
        Ok(Scm {
            n,
            parents,
            mechanisms,
            feature_names,
            topo_order,
        })
    }

    /// Independently manipulable features: `n` nodes, no edges.
    pub fn imf(n: usize) -> Self {
        Scm {
            n,
            parents: vec![Vec::new(); n],
            mechanisms: (0..n)
                .map(|_| Mechanism::Linear {
                    weights: Vec::new(),
                    bias: R::zero(),
                })
                .collect(),
            feature_names: (0..n).map(|i| format!("x{}", i + 1)).collect(),
            topo_order: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn parents(&self) -> &[Vec<usize>] {
        &self.parents
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn mechanisms(&self) -> &[Mechanism<R>] {
        &self.mechanisms
    }

    pub fn is_linear(&self) -> bool {
        self.mechanisms.iter().all(Mechanism::is_linear)
    }

    /// True when no feature has parents, i.e. `CF(x, do(X = x + theta))`
    /// reduces to `x + theta`.
    pub fn is_imf(&self) -> bool {
        self.parents.iter().all(Vec::is_empty)
    }

    fn check_input(&self, x: &[R]) -> Result<(), ScmError> {
        if x.len() != self.n {
            return Err(ScmError::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(ScmError::NonFiniteInput(i));
            }
        }
        Ok(())
    }

    fn check_action(&self, action: &RecourseAction<R>) -> Result<(), ScmError> {
        for &i in action.intervened() {
            if i >= self.n {
                return Err(ScmError::InterventionOutOfRange(i));
            }
        }
        Ok(())
    }

    fn gather(&self, x: &[R], feature: usize) -> Vec<R> {
        self.parents[feature].iter().map(|&p| x[p]).collect()
    }

    fn mech_value(&self, x: &[R], feature: usize) -> Result<R, ScmError> {
        let pa = self.gather(x, feature);
        let v = self.mechanisms[feature].eval(&pa);
        if !v.is_finite() {
            return Err(ScmError::NonFiniteMechanism(feature));
        }
        Ok(v)
    }

    /// Recover the exogenous variables consistent with `x`.
    pub fn abduct(&self, x: &[R]) -> Result<Vec<R>, ScmError> {
        self.check_input(x)?;
        let mut u = vec![R::zero(); self.n];
        for i in 0..self.n {
            u[i] = x[i] - self.mech_value(x, i)?;
        }
        Ok(u)
    }

    /// Map exogenous variables to features: `x_i = f_i(x_pa(i)) + u_i`.
    pub fn reconstruct(&self, u: &[R]) -> Result<Vec<R>, ScmError> {
        self.check_input(u)?;
        let mut x = vec![R::zero(); self.n];
        for &i in &self.topo_order {
            x[i] = self.mech_value(&x, i)? + u[i];
        }
        Ok(x)
    }

    /// Counterfactual under the hard intervention `do(X_I = x_I + theta)`,
    /// anchored at the factual values `x_I`. The null shift is the identity
    /// by definition and returns `x` bit-exactly.
    pub fn counterfactual_hard(
        &self,
        x: &[R],
        action: &RecourseAction<R>,
    ) -> Result<Vec<R>, ScmError> {
        self.check_action(action)?;
        if action.theta().iter().all(|&t| t == R::zero()) {
            self.check_input(x)?;
            return Ok(x.to_vec());
        }
        let u = self.abduct(x)?;
        self.propagate_hard(x, &u, action)
    }

    fn propagate_hard(
        &self,
        anchor: &[R],
        u: &[R],
        action: &RecourseAction<R>,
    ) -> Result<Vec<R>, ScmError> {
        let mut out = vec![R::zero(); self.n];
        for &i in &self.topo_order {
            out[i] = match action.intervened().iter().position(|&j| j == i) {
                Some(k) => anchor[i] + action.theta()[k],
                None => self.mech_value(&out, i)? + u[i],
            };
        }
        Ok(out)
    }

    /// Counterfactual under the additive intervention `Delta`, which shifts
    /// every mechanism output while preserving all causal relationships.
    /// For additive-noise models this equals `S(S^{-1}(x) + Delta)`. The
    /// null shift is the identity by definition and returns `x` bit-exactly.
    pub fn counterfactual_additive(&self, x: &[R], delta: &[R]) -> Result<Vec<R>, ScmError> {
        self.check_input(delta)?;
        if delta.iter().all(|&d| d == R::zero()) {
            self.check_input(x)?;
            return Ok(x.to_vec());
        }
        let u = self.abduct(x)?;
        let shifted: Vec<R> = u.iter().zip(delta).map(|(&a, &d)| a + d).collect();
        self.reconstruct(&shifted)
    }

    /// `CF(CF(x, Delta), a)`: perturb first, then act. The hard intervention
    /// anchors at the *perturbed* values, so uncertainty in the individual
    /// propagates into the action.
    pub fn apply_action_to_perturbed(
        &self,
        x: &[R],
        delta: &[R],
        action: &RecourseAction<R>,
    ) -> Result<Vec<R>, ScmError> {
        self.check_action(action)?;
        let perturbed = self.counterfactual_additive(x, delta)?;
        // Abduction of the perturbed individual gives u + Delta.
        let u = self.abduct(&perturbed)?;
        self.propagate_hard(&perturbed, &u, action)
    }

    /// Jacobian of `apply_action_to_perturbed` with respect to `Delta` at
    /// `Delta = 0`: column `j` is the response of the acted-upon individual
    /// to a unit additive intervention on feature `j`. Exact for linear
    /// mechanisms; a local central-difference estimate at `x` otherwise.
    pub fn interventional_jacobian(
        &self,
        x: &[R],
        intervened: &[usize],
    ) -> Result<Vec<Vec<R>>, ScmError> {
        if self.is_linear() {
            return Ok(self.linear_delta_jacobian(intervened));
        }
        let action = RecourseAction::new(
            intervened.to_vec(),
            vec![R::zero(); intervened.len()],
        )
        .expect("zero action is valid");
        let h = real::<R>(1e-5);
        let mut cols = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let mut dp = vec![R::zero(); self.n];
            dp[j] = h;
            let plus = self.apply_action_to_perturbed(x, &dp, &action)?;
            dp[j] = -h;
            let minus = self.apply_action_to_perturbed(x, &dp, &action)?;
            cols.push(
                plus.iter()
                    .zip(&minus)
                    .map(|(&p, &m)| (p - m) / (real::<R>(2.0) * h))
                    .collect::<Vec<R>>(),
            );
        }
        // Transpose columns into row-major J[i][j].
        Ok((0..self.n)
            .map(|i| (0..self.n).map(|j| cols[j][i]).collect())
            .collect())
    }

    /// Unit-perturbation propagation for linear mechanisms. Stage one runs
    /// the perturbation through the intact graph (the anchor values carry
    /// it into the intervened features); stage two re-propagates through
    /// the severed graph.
    fn linear_delta_jacobian(&self, intervened: &[usize]) -> Vec<Vec<R>> {
        let mut j_rows = vec![vec![R::zero(); self.n]; self.n];
        for col in 0..self.n {
            // dx'/dDelta_col through the intact graph.
            let mut m = vec![R::zero(); self.n];
            for &i in &self.topo_order {
                let mut acc = if i == col { R::one() } else { R::zero() };
                if let Mechanism::Linear { weights, .. } = &self.mechanisms[i] {
                    for (&p, &w) in self.parents[i].iter().zip(weights) {
                        acc += w * m[p];
                    }
                }
                m[i] = acc;
            }
            // Response of the acted-upon individual.
            let mut c = vec![R::zero(); self.n];
            for &i in &self.topo_order {
                c[i] = if intervened.contains(&i) {
                    m[i]
                } else {
                    let mut acc = if i == col { R::one() } else { R::zero() };
                    if let Mechanism::Linear { weights, .. } = &self.mechanisms[i] {
                        for (&p, &w) in self.parents[i].iter().zip(weights) {
                            acc += w * c[p];
                        }
                    }
                    acc
                };
            }
            for i in 0..self.n {
                j_rows[i][col] = c[i];
            }
        }
        j_rows
    }

    /// Jacobian of `CF(x, a)` with respect to `theta` (linear mechanisms
    /// only): column `k` is the response to a unit shift on intervened
    /// feature `intervened[k]`, which reaches other features only through
    /// non-severed mechanisms.
    pub fn theta_jacobian(&self, intervened: &[usize]) -> Option<Vec<Vec<R>>> {
        if !self.is_linear() {
            return None;
        }
        let mut cols = Vec::with_capacity(intervened.len());
        for &target in intervened {
            let mut a = vec![R::zero(); self.n];
            for &i in &self.topo_order {
                a[i] = if intervened.contains(&i) {
                    if i == target {
                        R::one()
                    } else {
                        R::zero()
                    }
                } else if let Mechanism::Linear { weights, .. } = &self.mechanisms[i] {
                    let mut acc = R::zero();
                    for (&p, &w) in self.parents[i].iter().zip(weights) {
                        acc += w * a[p];
                    }
                    acc
                } else {
                    unreachable!("linear SCM")
                };
            }
            cols.push(a);
        }
        Some((0..self.n)
            .map(|i| cols.iter().map(|c| c[i]).collect())
            .collect())
    }

    /// Sample exogenous variables from independent standard normals.
    pub fn sample_exogenous(&self, rng: &mut impl rand::Rng) -> Vec<R> {
        use rand_distr::{Distribution, StandardNormal};
        (0..self.n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                real(z)
            })
            .collect()
    }

    // ---- tape embedding ----

    /// Build the counterfactual pipeline on a tape and return one scalar
    /// node per feature of the final individual.
    ///
    /// `u` enters as constants; `delta` (if given) are per-feature scalar
    /// nodes for the additive intervention; `action` (if given) supplies
    /// per-target scalar nodes for the hard-intervention shifts. With both,
    /// the result is `CF(CF(x, Delta), a)` with the anchor taken at the
    /// perturbed individual.
    pub fn counterfactual_nodes(
        &self,
        tape: &mut Tape<R>,
        u: &[R],
        delta: Option<&[NodeId]>,
        action: Option<(&[usize], &[NodeId])>,
    ) -> Result<Vec<NodeId>, ScmError> {
        // Shifted exogenous nodes u' = u + Delta.
        let shifted: Vec<NodeId> = match delta {
            Some(d) => {
                debug_assert_eq!(d.len(), self.n);
                let mut out = Vec::with_capacity(self.n);
                for i in 0..self.n {
                    let c = tape.constant_scalar(u[i]);
                    out.push(tape.add(c, d[i])?);
                }
                out
            }
            None => u.iter().map(|&v| tape.constant_scalar(v)).collect(),
        };

        // Perturbed individual x' = S(u').
        let mut perturbed = vec![NodeId(usize::MAX); self.n];
        for &i in &self.topo_order {
            let pa: Vec<NodeId> = self.parents[i].iter().map(|&p| perturbed[p]).collect();
            let mech = self.mechanisms[i].node(tape, &pa)?;
            perturbed[i] = tape.add(mech, shifted[i])?;
        }

        let Some((intervened, theta)) = action else {
            return Ok(perturbed);
        };

        // Acted-upon individual, anchored at x'.
        let mut out = vec![NodeId(usize::MAX); self.n];
        for &i in &self.topo_order {
            out[i] = match intervened.iter().position(|&j| j == i) {
                Some(k) => tape.add(perturbed[i], theta[k])?,
                None => {
                    let pa: Vec<NodeId> = self.parents[i].iter().map(|&p| out[p]).collect();
                    let mech = self.mechanisms[i].node(tape, &pa)?;
                    tape.add(mech, shifted[i])?
                }
            };
        }
        Ok(out)
    }

    // ---- file format ----

    pub fn to_file(&self) -> ScmFile {
        ScmFile {
            n: self.n,
            parents: self.parents.clone(),
            mechanisms: self
                .mechanisms
                .iter()
                .map(|m| match m {
                    Mechanism::Linear { weights, bias } => MechanismFile::Linear {
                        weights: weights.iter().map(|w| w.to_f64().unwrap()).collect(),
                        bias: bias.to_f64().unwrap(),
                    },
                    Mechanism::Nonlinear { expr, bias } => MechanismFile::Nonlinear {
                        expr: expr.clone(),
                        bias: bias.to_f64().unwrap(),
                    },
                })
                .collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn from_file(file: ScmFile) -> Result<Self, ScmError> {
        if file.parents.len() != file.n {
            return Err(ScmError::MalformedDefinition(format!(
                "n = {} but {} parent lists",
                file.n,
                file.parents.len()
            )));
        }
        let mechanisms = file
            .mechanisms
            .into_iter()
            .map(|m| match m {
                MechanismFile::Linear { weights, bias } => Mechanism::Linear {
                    weights: weights.into_iter().map(real).collect(),
                    bias: real(bias),
                },
                MechanismFile::Nonlinear { expr, bias } => Mechanism::Nonlinear {
                    expr,
                    bias: real(bias),
                },
            })
            .collect();
        Scm::new(file.parents, mechanisms, file.feature_names)
    }

    pub fn from_json(json: &str) -> Result<Self, ScmError> {
        let file: ScmFile = serde_json::from_str(json)
            .map_err(|e| ScmError::MalformedDefinition(e.to_string()))?;
        Scm::from_file(file)
    }
}

/// Serialized SCM definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScmFile {
    pub n: usize,
    pub parents: Vec<Vec<usize>>,
    pub mechanisms: Vec<MechanismFile>,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum MechanismFile {
    Linear {
        weights: Vec<f64>,
        #[serde(default)]
        bias: f64,
    },
    Nonlinear {
        expr: Expr,
        #[serde(default)]
        bias: f64,
    },
}

/// The non-causal special case: no edges, so `CF(x, do(X = x + theta))`
/// is exactly `x + theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImfScm {
    pub n: usize,
}

impl ImfScm {
    pub fn new(n: usize) -> Self {
        ImfScm { n }
    }

    pub fn to_scm<R: Real>(&self) -> Scm<R> {
        Scm::imf(self.n)
    }
}

fn toposort(parents: &[Vec<usize>]) -> Result<Vec<usize>, ScmError> {
    let n = parents.len();
    let mut indegree = vec![0usize; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, pa) in parents.iter().enumerate() {
        indegree[i] = pa.len();
        for &p in pa {
            if p >= n {
                return Err(ScmError::ParentOutOfRange {
                    feature: i,
                    parent: p,
                    n,
                });
            }
            children[p].push(i);
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(ScmError::Cyclic(stuck));
    }
    Ok(order)
}

/// SCM definition for the builtin seven-node loan scenario.
pub const LOAN_LIKE_JSON: &str = include_str!("../assets/loan_like.json");

/// Builtin example SCMs.
///
/// - `income-savings`: linear two-node chain `X1 = U1`, `X2 = X1 + U2`;
/// - `quadratic`: `X1 = U1`, `X2 = X1^2 + U2`;
/// - `loan-like`: seven-node DAG with mixed linear/tanh mechanisms, shipped
///   as [`LOAN_LIKE_JSON`];
/// - `imf-k`: `k` features with no edges, e.g. `imf-3`.
pub fn builtin_scm<R: Real>(name: &str) -> Result<Scm<R>, ScmError> {
    match name {
        "income-savings" => Scm::new(
            vec![vec![], vec![0]],
            vec![
                Mechanism::Linear {
                    weights: vec![],
                    bias: R::zero(),
                },
                Mechanism::Linear {
                    weights: vec![R::one()],
                    bias: R::zero(),
                },
            ],
            vec!["income".into(), "savings".into()],
        ),
        "quadratic" => Scm::new(
            vec![vec![], vec![0]],
            vec![
                Mechanism::Linear {
                    weights: vec![],
                    bias: R::zero(),
                },
                Mechanism::Nonlinear {
                    expr: Expr::Square {
                        arg: Box::new(Expr::Var { index: 0 }),
                    },
                    bias: R::zero(),
                },
            ],
            vec!["x1".into(), "x2".into()],
        ),
        "loan-like" => Scm::from_json(LOAN_LIKE_JSON),
        _ => {
            if let Some(k) = name.strip_prefix("imf-") {
                let k: usize = k
                    .parse()
                    .map_err(|_| ScmError::UnknownBuiltin(name.to_string()))?;
                if k == 0 {
                    return Err(ScmError::UnknownBuiltin(name.to_string()));
                }
                Ok(Scm::imf(k))
            } else {
                Err(ScmError::UnknownBuiltin(name.to_string()))
            }
        }
    }
}

/// Names accepted by [`builtin_scm`] (with `imf-k` standing for any k >= 1).
pub const BUILTIN_SCM_NAMES: &[&str] = &["income-savings", "quadratic", "loan-like", "imf-k"];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fig2() -> Scm<f64> {
        builtin_scm("income-savings").unwrap()
    }

    fn action(i: &[usize], t: &[f64]) -> RecourseAction<f64> {
        RecourseAction::new(i.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn abduct_hand_example() {
        let scm = fig2();
        let u = scm.abduct(&[1.0, 2.0]).unwrap();
        assert_eq!(u, vec![1.0, 1.0]);
    }

    #[test]
    fn abduct_imf_is_identity() {
        let scm = Scm::<f64>::imf(2);
        assert_eq!(scm.abduct(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn roundtrip_on_all_builtins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["income-savings", "quadratic", "loan-like", "imf-3"] {
            let scm: Scm<f64> = builtin_scm(name).unwrap();
            for _ in 0..200 {
                let u0 = scm.sample_exogenous(&mut rng);
                let x = scm.reconstruct(&u0).unwrap();
                let u = scm.abduct(&x).unwrap();
                let back = scm.reconstruct(&u).unwrap();
                for i in 0..scm.n() {
                    assert!((u[i] - u0[i]).abs() <= 1e-8, "{name} abduct");
                    assert!((back[i] - x[i]).abs() <= 1e-8, "{name} reconstruct");
                }
            }
        }
    }

    #[test]
    fn hard_intervention_examples() {
        let scm = fig2();
        let x = [1.0, 2.0];
        let cf = scm.counterfactual_hard(&x, &action(&[0], &[1.0])).unwrap();
        assert_eq!(cf, vec![2.0, 3.0]);

        // Intervening on X2 severs it from X1.
        let cf = scm.counterfactual_hard(&x, &action(&[1], &[1.0])).unwrap();
        assert_eq!(cf, vec![1.0, 3.0]);

        // Null shift is the identity.
        let cf = scm.counterfactual_hard(&x, &action(&[0], &[0.0])).unwrap();
        assert_eq!(cf, vec![1.0, 2.0]);
    }

    #[test]
    fn additive_intervention_examples() {
        let scm = fig2();
        let cf = scm
            .counterfactual_additive(&[1.0, 2.0], &[0.1, 0.0])
            .unwrap();
        assert!((cf[0] - 1.1).abs() < 1e-12);
        assert!((cf[1] - 2.1).abs() < 1e-12);

        let cf = scm.counterfactual_additive(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(cf, vec![1.0, 2.0]);

        let quad: Scm<f64> = builtin_scm("quadratic").unwrap();
        let cf = quad
            .counterfactual_additive(&[1.0, 2.0], &[0.1, 0.0])
            .unwrap();
        assert!((cf[0] - 1.1).abs() < 1e-12);
        assert!((cf[1] - 2.21).abs() < 1e-12);
    }

    #[test]
    fn perturb_then_act_chains_the_examples() {
        let scm = fig2();
        let a = action(&[0], &[1.0]);
        let out = scm
            .apply_action_to_perturbed(&[1.0, 2.0], &[0.1, 0.0], &a)
            .unwrap();
        assert!((out[0] - 2.1).abs() < 1e-12);
        assert!((out[1] - 3.1).abs() < 1e-12);

        // Delta = 0 reduces to the plain counterfactual.
        let out = scm
            .apply_action_to_perturbed(&[1.0, 2.0], &[0.0, 0.0], &a)
            .unwrap();
        assert_eq!(out, scm.counterfactual_hard(&[1.0, 2.0], &a).unwrap());
    }

    #[test]
    fn interventional_jacobian_examples() {
        let imf = Scm::<f64>::imf(3);
        let j = imf.interventional_jacobian(&[0.0; 3], &[0, 2]).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let want = if i == k { 1.0 } else { 0.0 };
                assert_eq!(j[i][k], want);
            }
        }

        let scm = fig2();
        for intervened in [&[0usize][..], &[1usize][..]] {
            let j = scm.interventional_jacobian(&[1.0, 2.0], intervened).unwrap();
            assert_eq!(j[0], vec![1.0, 0.0]);
            assert_eq!(j[1], vec![1.0, 1.0]);
        }
    }

    #[test]
    fn jacobians_match_finite_differences_on_builtins() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for name in ["income-savings", "quadratic", "loan-like", "imf-3"] {
            let scm: Scm<f64> = builtin_scm(name).unwrap();
            let x = scm.reconstruct(&scm.sample_exogenous(&mut rng)).unwrap();
            let intervened: Vec<usize> = (0..scm.n()).filter(|i| i % 2 == 0).collect();
            let a = action(&intervened, &vec![0.0; intervened.len()]);
            let j = scm.interventional_jacobian(&x, &intervened).unwrap();
            let h = 1e-4;
            for col in 0..scm.n() {
                let mut dp = vec![0.0; scm.n()];
                dp[col] = h;
                let plus = scm.apply_action_to_perturbed(&x, &dp, &a).unwrap();
                dp[col] = -h;
                let minus = scm.apply_action_to_perturbed(&x, &dp, &a).unwrap();
                for i in 0..scm.n() {
                    let fd = (plus[i] - minus[i]) / (2.0 * h);
                    assert!(
                        (j[i][col] - fd).abs() <= 1e-6,
                        "{name} J[{i}][{col}] = {} vs fd {fd}",
                        j[i][col]
                    );
                }
            }
        }
    }

    #[test]
    fn linear_composition_law() {
        // For linear SCMs: CF(CF(x, d), a) = CF(x, a) + J d.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for name in ["income-savings", "imf-3", "loan-linearized"] {
            let scm: Scm<f64> = match name {
                "loan-linearized" => Scm::new(
                    vec![vec![], vec![0], vec![0, 1], vec![2]],
                    vec![
                        Mechanism::Linear { weights: vec![], bias: 0.0 },
                        Mechanism::Linear { weights: vec![0.8], bias: 0.1 },
                        Mechanism::Linear { weights: vec![0.5, 0.4], bias: -0.2 },
                        Mechanism::Linear { weights: vec![0.7], bias: 0.0 },
                    ],
                    vec!["a".into(), "b".into(), "c".into(), "d".into()],
                )
                .unwrap(),
                _ => builtin_scm(name).unwrap(),
            };
            let n = scm.n();
            for _ in 0..200 {
                let x = scm.reconstruct(&scm.sample_exogenous(&mut rng)).unwrap();
                let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let k = rng.gen_range(1..=n);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx.truncate(k);
                idx.sort_unstable();
                let theta: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a = action(&idx, &theta);

                let lhs = scm.apply_action_to_perturbed(&x, &delta, &a).unwrap();
                let base = scm.counterfactual_hard(&x, &a).unwrap();
                let j = scm.interventional_jacobian(&x, &idx).unwrap();
                for i in 0..n {
                    let jd: f64 = (0..n).map(|c| j[i][c] * delta[c]).sum();
                    assert!(
                        (lhs[i] - (base[i] + jd)).abs() <= 1e-8,
                        "{name}: {} vs {}",
                        lhs[i],
                        base[i] + jd
                    );
                }
            }
        }
    }

    #[test]
    fn tape_pipeline_matches_plain_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for name in ["income-savings", "quadratic", "loan-like"] {
            let scm: Scm<f64> = builtin_scm(name).unwrap();
            let n = scm.n();
            let x = scm.reconstruct(&scm.sample_exogenous(&mut rng)).unwrap();
            let u = scm.abduct(&x).unwrap();
            let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let intervened = vec![0usize];
            let theta = vec![rng.gen_range(-0.5..0.5)];
            let a = action(&intervened, &theta);

            let mut tape = Tape::<f64>::new();
            let dn: Vec<NodeId> = delta.iter().map(|&d| tape.leaf_scalar(d)).collect();
            let tn: Vec<NodeId> = theta.iter().map(|&t| tape.leaf_scalar(t)).collect();
            let out = scm
                .counterfactual_nodes(&mut tape, &u, Some(&dn), Some((&intervened, &tn)))
                .unwrap();
            let plain = scm.apply_action_to_perturbed(&x, &delta, &a).unwrap();
            for i in 0..n {
                assert!((tape.scalar(out[i]) - plain[i]).abs() <= 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn builtin_structure() {
        let scm: Scm<f64> = builtin_scm("income-savings").unwrap();
        assert_eq!(scm.n(), 2);
        assert_eq!(scm.parents()[1], vec![0]);
        assert!(scm.is_linear());

        let quad: Scm<f64> = builtin_scm("quadratic").unwrap();
        assert!(matches!(
            quad.mechanisms()[1],
            Mechanism::Nonlinear {
                expr: Expr::Square { .. },
                ..
            }
        ));

        let imf: Scm<f64> = builtin_scm("imf-3").unwrap();
        assert_eq!(imf.n(), 3);
        assert!(imf.is_imf());

        let loan: Scm<f64> = builtin_scm("loan-like").unwrap();
        assert_eq!(loan.n(), 7);
        assert!(!loan.is_linear());

        assert!(matches!(
            builtin_scm::<f64>("nope"),
            Err(ScmError::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn imf_counterfactual_is_plain_shift() {
        let imf = ImfScm::new(4).to_scm::<f64>();
        let x = [0.3, -1.0, 2.0, 0.0];
        let a = action(&[0, 1, 2, 3], &[0.5, 0.5, -0.25, 1.0]);
        let cf = imf.counterfactual_hard(&x, &a).unwrap();
        assert_eq!(cf, vec![0.8, -0.5, 1.75, 1.0]);
    }

    #[test]
    fn construction_rejects_bad_graphs() {
        // Cycle.
        let err = Scm::<f64>::new(
            vec![vec![1], vec![0]],
            vec![
                Mechanism::Linear { weights: vec![1.0], bias: 0.0 },
                Mechanism::Linear { weights: vec![1.0], bias: 0.0 },
            ],
            vec!["a".into(), "b".into()],
        )
        .unwrap_err();
        assert!(matches!(err, ScmError::Cyclic(_)));

        // Weight count mismatch.
        let err = Scm::<f64>::new(
            vec![vec![], vec![0]],
            vec![
                Mechanism::Linear { weights: vec![], bias: 0.0 },
                Mechanism::Linear { weights: vec![1.0, 2.0], bias: 0.0 },
            ],
            vec!["a".into(), "b".into()],
        )
        .unwrap_err();
        assert!(matches!(err, ScmError::WeightCount { .. }));

        // Non-finite parameter.
        let err = Scm::<f64>::new(
            vec![vec![], vec![0]],
            vec![
                Mechanism::Linear { weights: vec![], bias: 0.0 },
                Mechanism::Linear { weights: vec![f64::NAN], bias: 0.0 },
            ],
            vec!["a".into(), "b".into()],
        )
        .unwrap_err();
        assert!(matches!(err, ScmError::NonFiniteParameter { .. }));
    }

    #[test]
    fn scm_file_roundtrip() {
        let scm: Scm<f64> = builtin_scm("loan-like").unwrap();
        let json = serde_json::to_string(&scm.to_file()).unwrap();
        let back = Scm::<f64>::from_json(&json).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = scm.sample_exogenous(&mut rng);
        assert_eq!(scm.reconstruct(&u).unwrap(), back.reconstruct(&u).unwrap());
    }
}
