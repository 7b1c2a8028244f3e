//! Recourse actions, feasibility constraints, and the robust recourse
//! solvers.
//!
//! Two generation routes:
//!
//! - [`robust_linear_recourse`]: for a linear classifier and linear SCM,
//!   robustness against an L2 uncertainty set is equivalent to standard
//!   recourse under a raised acceptance threshold
//!   `b' = b~ + ||J^T w||_2 * eps`, so the minimum-L1 action is an exact
//!   greedy allocation over the effective per-feature weights.
//! - [`robust_recourse_pgd`]: min-max projected gradient for differentiable
//!   classifiers. The inner maximization finds the worst additive
//!   intervention in the eps-ball; the outer loop descends on
//!   `cost + lambda * loss` over the shift vector, growing `lambda` every
//!   round, and exits as soon as the locally-worst-case individual is
//!   favorably classified.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::model::Scorer;
use crate::num::{dot, norm2, norm_inf, project_l2_ball, real, Real};
use crate::scm::{Scm, ScmError};

#[derive(Debug, Error)]
pub enum RecourseError {
    #[error("action intervenes on no feature but carries a nonzero shift")]
    EmptyInterventionSet,
    #[error("action has {targets} target features but {thetas} shift entries")]
    ActionLengthMismatch { targets: usize, thetas: usize },
    #[error("non-finite shift vector")]
    NonFiniteTheta,
    #[error("feature {index}: lower bound {lower} exceeds upper bound {upper}")]
    InvertedBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("uncertainty radius must be nonnegative, got {0}")]
    NegativeEpsilon(f64),
    #[error(
        "closed-form robust recourse requires a linear classifier and a linear SCM; \
         use the projected-gradient solver instead"
    )]
    NotLinear,
    #[error("cost bound requires a valid recourse action: <w, J theta> = {0} is not positive")]
    InvalidBaseAction(f64),
    #[error("non-finite gradient in solver at round {round}, step {step}")]
    NonFiniteGradient { round: usize, step: usize },
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A recourse recommendation: add `theta` to the features in `intervened`,
/// implemented as a hard intervention anchored at the (possibly perturbed)
/// individual's current values.
#[derive(Debug, Clone, PartialEq)]
pub struct RecourseAction<R> {
    intervened: Vec<usize>,
    theta: Vec<R>,
}

impl<R: Real> RecourseAction<R> {
    pub fn new(intervened: Vec<usize>, theta: Vec<R>) -> Result<Self, RecourseError> {
        if intervened.len() != theta.len() {
            return Err(RecourseError::ActionLengthMismatch {
                targets: intervened.len(),
                thetas: theta.len(),
            });
        }
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(RecourseError::NonFiniteTheta);
        }
        if intervened.is_empty() && !theta.is_empty() {
            return Err(RecourseError::EmptyInterventionSet);
        }
        Ok(RecourseAction { intervened, theta })
    }

    /// The null action: intervene nowhere.
    pub fn null() -> Self {
        RecourseAction {
            intervened: Vec::new(),
            theta: Vec::new(),
        }
    }

    pub fn intervened(&self) -> &[usize] {
        &self.intervened
    }

    pub fn theta(&self) -> &[R] {
        &self.theta
    }

    /// Embed `theta` into a full-length feature vector (zeros elsewhere).
    pub fn embed(&self, n: usize) -> Vec<R> {
        let mut out = vec![R::zero(); n];
        for (&i, &t) in self.intervened.iter().zip(&self.theta) {
            out[i] = t;
        }
        out
    }

    pub fn cost(&self, cost: &CostFn) -> R {
        cost.eval(&self.theta)
    }
}

/// Per-feature actionability direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Free,
    IncreaseOnly,
    DecreaseOnly,
}

/// One feature's actionability record, as stored in feasibility files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRule {
    pub name: String,
    pub actionable: bool,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    /// Bounds on the post-action feature value.
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

fn default_direction() -> Direction {
    Direction::Free
}

/// Actionability constraints for every feature. Box + direction form, so
/// the set is star-shaped around the null action: any feasible shift stays
/// feasible when scaled toward zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilitySpec {
    pub features: Vec<FeatureRule>,
}

impl FeasibilitySpec {
    pub fn new(features: Vec<FeatureRule>) -> Result<Self, RecourseError> {
        for (i, f) in features.iter().enumerate() {
            if let (Some(lo), Some(hi)) = (f.min, f.max) {
                if lo > hi {
                    return Err(RecourseError::InvertedBounds {
                        index: i,
                        lower: lo,
                        upper: hi,
                    });
                }
            }
        }
        Ok(FeasibilitySpec { features })
    }

    /// Every feature actionable, unbounded, free direction.
    pub fn all_free(names: &[String]) -> Self {
        FeasibilitySpec {
            features: names
                .iter()
                .map(|n| FeatureRule {
                    name: n.clone(),
                    actionable: true,
                    direction: Direction::Free,
                    min: None,
                    max: None,
                })
                .collect(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let rules: Vec<FeatureRule> = serde_json::from_str(json)?;
        Ok(FeasibilitySpec { features: rules })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.features).expect("feasibility serializes")
    }

    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn actionable_indices(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.actionable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Mask vector with 1 for actionable features.
    pub fn actionable_mask<R: Real>(&self) -> Vec<R> {
        self.features
            .iter()
            .map(|f| if f.actionable { R::one() } else { R::zero() })
            .collect()
    }

    /// Feasible interval for the shift of `feature` given the factual value
    /// `x_i` (bounds apply to the post-action value `x_i + theta_i`).
    pub fn shift_interval<R: Real>(&self, feature: usize, x_i: R) -> (R, R) {
        let rule = &self.features[feature];
        if !rule.actionable {
            return (R::zero(), R::zero());
        }
        let mut lo = rule.min.map_or(-R::infinity(), |m| real::<R>(m) - x_i);
        let mut hi = rule.max.map_or(R::infinity(), |m| real::<R>(m) - x_i);
        match rule.direction {
            Direction::Free => {}
            Direction::IncreaseOnly => lo = lo.max(R::zero()),
            Direction::DecreaseOnly => hi = hi.min(R::zero()),
        }
        // An individual already outside its box keeps the null shift feasible.
        (lo.min(R::zero()), hi.max(R::zero()))
    }

    /// Coordinate-wise projection of an action's shifts onto the feasible
    /// box. Idempotent by construction.
    pub fn project<R: Real>(&self, x: &[R], intervened: &[usize], theta: &mut [R]) {
        for (k, &i) in intervened.iter().enumerate() {
            let (lo, hi) = self.shift_interval(i, x[i]);
            theta[k] = theta[k].max(lo).min(hi);
        }
    }

    pub fn is_feasible<R: Real>(&self, x: &[R], action: &RecourseAction<R>) -> bool {
        let mut projected = action.theta().to_vec();
        self.project(x, action.intervened(), &mut projected);
        projected.iter().zip(action.theta()).all(|(&p, &t)| p == t)
    }
}

/// Feasibility constraints shipped with the builtin loan scenario.
pub const LOAN_LIKE_FEASIBILITY_JSON: &str = include_str!("../assets/loan_like_feasibility.json");

/// Builtin feasibility constraints, where a builtin SCM defines some.
pub fn builtin_feasibility(scm_name: &str) -> Option<FeasibilitySpec> {
    match scm_name {
        "loan-like" => Some(
            FeasibilitySpec::from_json(LOAN_LIKE_FEASIBILITY_JSON)
                .expect("bundled feasibility parses"),
        ),
        _ => None,
    }
}

/// Which norm bounds the additive interventions in the uncertainty set, and
/// by how much.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub norm: NormKind,
    pub epsilon: f64,
}

impl UncertaintySpec {
    pub fn l2(epsilon: f64) -> Result<Self, RecourseError> {
        if epsilon < 0.0 {
            return Err(RecourseError::NegativeEpsilon(epsilon));
        }
        Ok(UncertaintySpec {
            norm: NormKind::L2,
            epsilon,
        })
    }

    /// Degenerate set containing only the factual individual.
    pub fn none() -> Self {
        UncertaintySpec {
            norm: NormKind::L2,
            epsilon: 0.0,
        }
    }

    pub fn epsilon<R: Real>(&self) -> R {
        real(self.epsilon)
    }
}

/// Effort model for a recourse action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostFn {
    pub kind: CostKind,
}

impl Default for CostFn {
    fn default() -> Self {
        CostFn::l1()
    }
}

impl CostFn {
    pub fn l1() -> Self {
        CostFn { kind: CostKind::L1 }
    }

    pub fn eval<R: Real>(&self, theta: &[R]) -> R {
        match self.kind {
            CostKind::L1 => crate::num::norm1(theta),
        }
    }

    pub fn node<R: Real>(&self, tape: &mut Tape<R>, theta: NodeId) -> Result<NodeId, AutodiffError> {
        match self.kind {
            CostKind::L1 => tape.norm(theta, 1),
        }
    }

    /// Proximal map of `step * cost` at `v`, coordinate-wise. For the L1
    /// cost this is soft thresholding, which pins coordinates whose pull
    /// from the constraint loss is weaker than the cost slope at exactly
    /// zero instead of letting them chatter around it.
    pub fn prox<R: Real>(&self, v: R, step: R) -> R {
        match self.kind {
            CostKind::L1 => {
                if v > step {
                    v - step
                } else if v < -step {
                    v + step
                } else {
                    R::zero()
                }
            }
        }
    }
}

/// A found action with its cost; `tight` marks closed-form solutions whose
/// greedy allocation met the robust margin exactly.
#[derive(Debug, Clone)]
pub struct FoundRecourse<R> {
    pub action: RecourseAction<R>,
    pub cost: R,
    pub tight: bool,
    /// Outer rounds consumed (projected-gradient solver only).
    pub rounds: usize,
}

#[derive(Debug, Clone)]
pub enum RecourseOutcome<R> {
    Found(FoundRecourse<R>),
    NotFound,
}

impl<R> RecourseOutcome<R> {
    pub fn found(&self) -> Option<&FoundRecourse<R>> {
        match self {
            RecourseOutcome::Found(f) => Some(f),
            RecourseOutcome::NotFound => None,
        }
    }

    pub fn is_found(&self) -> bool {
        matches!(self, RecourseOutcome::Found(_))
    }
}

/// `h(CF(x, a)) = 1`, re-checked from scratch (plain evaluation).
pub fn is_valid_recourse<R: Real, S: Scorer<R>>(
    classifier: &S,
    scm: &Scm<R>,
    x: &[R],
    action: &RecourseAction<R>,
) -> Result<bool, RecourseError> {
    let cf = scm.counterfactual_hard(x, action)?;
    Ok(classifier.decide(&cf))
}

/// `J^T w` for the interventional Jacobian of the action's target set.
fn jacobian_transpose_w<R: Real>(
    scm: &Scm<R>,
    x: &[R],
    intervened: &[usize],
    w: &[R],
) -> Result<Vec<R>, RecourseError> {
    let j = scm.interventional_jacobian(x, intervened)?;
    let n = scm.n();
    Ok((0..n)
        .map(|col| (0..n).map(|i| w[i] * j[i][col]).sum())
        .collect())
}

/// Closed-form minimum-L1 adversarially robust recourse for a linear
/// classifier and linear SCM.
///
/// Solves `min ||theta||_1` subject to
/// `<w, CF(x, a)> >= b~ + ||J^T w||_2 * eps` plus direction/box limits by
/// greedy allocation over the effective weights `q = A^T w` (A the
/// theta-Jacobian of the hard intervention): push the highest-|q| feature to
/// its limit, then the next, setting the final one fractionally. Ties break
/// toward the lower feature index. Returned actions are robust by
/// construction; `NotFound` means the feasible box cannot meet the margin.
pub fn robust_linear_recourse<R: Real, S: Scorer<R>>(
    classifier: &S,
    scm: &Scm<R>,
    x: &[R],
    feas: &FeasibilitySpec,
    unc: &UncertaintySpec,
    cost: &CostFn,
) -> Result<RecourseOutcome<R>, RecourseError> {
    let (w, b_tilde) = classifier.linear_halfspace().ok_or(RecourseError::NotLinear)?;
    if !scm.is_linear() {
        return Err(RecourseError::NotLinear);
    }
    let intervened = feas.actionable_indices();
    let eps = unc.epsilon::<R>();
    let jtw = jacobian_transpose_w(scm, x, &intervened, &w)?;
    // Dual norm of the L2 uncertainty set is L2.
    let raised = b_tilde + norm2(&jtw) * eps;
    let margin = raised - dot(&w, x);

    if margin <= R::zero() {
        // Already robust: null shifts on the full target set keep the
        // action's Jacobian consistent with the margin computation above.
        let theta = vec![R::zero(); intervened.len()];
        let action = RecourseAction::new(intervened, theta)?;
        let cost_value = action.cost(cost);
        return Ok(RecourseOutcome::Found(FoundRecourse {
            action,
            cost: cost_value,
            tight: false,
            rounds: 0,
        }));
    }

    let a = scm
        .theta_jacobian(&intervened)
        .ok_or(RecourseError::NotLinear)?;
    let n = scm.n();
    let q: Vec<R> = (0..intervened.len())
        .map(|k| (0..n).map(|i| w[i] * a[i][k]).sum())
        .collect();

    // Stable sort keeps equal-|q| entries in ascending feature order.
    let mut order: Vec<usize> = (0..intervened.len()).collect();
    order.sort_by(|&p, &r| q[r].abs().partial_cmp(&q[p].abs()).expect("finite weights"));

    let mut theta = vec![R::zero(); intervened.len()];
    let mut remaining = margin;
    for &k in &order {
        if q[k] == R::zero() {
            break;
        }
        let i = intervened[k];
        let (lo, hi) = feas.shift_interval(i, x[i]);
        let cap = if q[k] > R::zero() { hi } else { lo };
        let gain = q[k] * cap;
        if gain <= R::zero() {
            continue;
        }
        if gain >= remaining {
            theta[k] = remaining / q[k];
            remaining = R::zero();
            break;
        }
        theta[k] = cap;
        remaining -= gain;
    }
    if remaining > R::zero() {
        return Ok(RecourseOutcome::NotFound);
    }
    let action = RecourseAction::new(intervened, theta)?;
    let cost_value = action.cost(cost);
    Ok(RecourseOutcome::Found(FoundRecourse {
        action,
        cost: cost_value,
        tight: true,
        rounds: 0,
    }))
}

/// Solver parameters for [`robust_recourse_pgd`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdParams {
    /// Initial constraint-loss weight.
    pub lambda0: f64,
    /// Per-round multiplier on lambda. The default grows lambda (> 1),
    /// placing increasing emphasis on crossing the decision boundary;
    /// [`PgdParams::decreasing_schedule`] gives the alternative reading.
    pub gamma: f64,
    /// Outer rounds.
    pub n_max: usize,
    /// Gradient steps per round.
    pub inner_steps: usize,
    /// Outer step size on the shift vector.
    pub alpha: f64,
    /// Projected-gradient-ascent steps for the inner maximization.
    pub pga_steps: usize,
    /// Inner ascent step as a fraction of eps.
    pub pga_step_frac: f64,
    /// Inner convergence: stop the round when the shift update's max-norm
    /// falls below this.
    pub converge_tol: f64,
}

impl Default for PgdParams {
    fn default() -> Self {
        PgdParams {
            lambda0: 1.0,
            gamma: 1.0 / 0.9,
            n_max: 100,
            inner_steps: 50,
            alpha: 0.05,
            pga_steps: 20,
            pga_step_frac: 0.2,
            converge_tol: 1e-5,
        }
    }
}

impl PgdParams {
    /// Alternative schedule with lambda decaying by 0.9 per round.
    pub fn decreasing_schedule() -> Self {
        PgdParams {
            gamma: 0.9,
            ..PgdParams::default()
        }
    }
}

/// Worst-case additive intervention for a fixed action.
#[derive(Debug, Clone)]
pub struct InnerMaxResult<R> {
    pub delta: Vec<R>,
    pub x_star: Vec<R>,
    pub loss: R,
}

/// Reusable tape for the inner maximization: delta enters as leaves, the
/// shift vector as settable constants.
struct InnerContext<R: Real> {
    tape: Tape<R>,
    delta_nodes: Vec<NodeId>,
    theta_inputs: Vec<NodeId>,
    loss: NodeId,
    eps: R,
    n: usize,
}

impl<R: Real> InnerContext<R> {
    fn new<S: Scorer<R>>(
        classifier: &S,
        scm: &Scm<R>,
        u: &[R],
        intervened: &[usize],
        theta: &[R],
        eps: R,
    ) -> Result<Self, RecourseError> {
        let n = scm.n();
        let mut tape = Tape::new();
        let delta_nodes: Vec<NodeId> = (0..n).map(|_| tape.leaf_scalar(R::zero())).collect();
        let theta_inputs: Vec<NodeId> = theta.iter().map(|&t| tape.constant_scalar(t)).collect();
        let cf = scm.counterfactual_nodes(
            &mut tape,
            u,
            Some(&delta_nodes),
            Some((intervened, &theta_inputs)),
        )?;
        let xvec = tape.stack(&cf)?;
        let score = classifier.score_node(&mut tape, xvec)?;
        let lg = tape.log(score);
        let loss = tape.scale(lg, -R::one());
        Ok(InnerContext {
            tape,
            delta_nodes,
            theta_inputs,
            loss,
            eps,
            n,
        })
    }

    fn set_theta(&mut self, theta: &[R]) -> Result<(), RecourseError> {
        for (&node, &t) in self.theta_inputs.iter().zip(theta) {
            self.tape.set_input(node, &[t])?;
        }
        Ok(())
    }

    fn set_delta(&mut self, delta: &[R]) -> Result<(), RecourseError> {
        for (&node, &d) in self.delta_nodes.iter().zip(delta) {
            self.tape.set_input(node, &[d])?;
        }
        Ok(())
    }

    fn loss_at(&mut self, delta: &[R]) -> Result<R, RecourseError> {
        self.set_delta(delta)?;
        self.tape.replay();
        Ok(self.tape.scalar(self.loss))
    }

    /// Projected gradient ascent from `init`, returning the best iterate
    /// (initial point included). The step budget is split into a coarse
    /// phase and two polish phases at a fifth and a twenty-fifth of the
    /// step size.
    fn ascend(&mut self, init: &[R], steps: usize, step: R) -> Result<(Vec<R>, R), RecourseError> {
        let polish = steps / 4;
        let (mut d, mut l) = self.ascend_phase(init, steps - 2 * polish, step)?;
        for divisor in [5.0, 25.0] {
            if polish == 0 {
                break;
            }
            let (d2, l2) = self.ascend_phase(&d, polish, step / real::<R>(divisor))?;
            if l2 > l {
                d = d2;
                l = l2;
            }
        }
        Ok((d, l))
    }

    fn ascend_phase(
        &mut self,
        init: &[R],
        steps: usize,
        step: R,
    ) -> Result<(Vec<R>, R), RecourseError> {
        let mut delta = init.to_vec();
        project_l2_ball(&mut delta, self.eps);
        let mut best_loss = self.loss_at(&delta)?;
        let mut best = delta.clone();
        for _ in 0..steps {
            let grads = self.tape.gradient(self.loss, &self.delta_nodes)?;
            for (d, g) in delta.iter_mut().zip(&grads) {
                *d += step * g.data[0];
            }
            project_l2_ball(&mut delta, self.eps);
            let loss = self.loss_at(&delta)?;
            if loss > best_loss {
                best_loss = loss;
                best = delta.clone();
            }
        }
        Ok((best, best_loss))
    }

    /// Best local maximizer from the zero start plus a second ascent seeded
    /// at the best boundary axis probe. The zero-start ascent can stall on
    /// a score crest or exhaust its budget strictly inside the ball; the
    /// probe start is already at the boundary, where the worst case
    /// generically lives.
    fn worst_case(&mut self, steps: usize, step: R) -> Result<(Vec<R>, R), RecourseError> {
        let zero = vec![R::zero(); self.n];
        let (mut best_delta, mut best_loss) = self.ascend(&zero, steps, step)?;

        let mut best_probe: Option<(Vec<R>, R)> = None;
        for j in 0..self.n {
            for sign in [R::one(), -R::one()] {
                let mut probe = vec![R::zero(); self.n];
                probe[j] = sign * self.eps;
                let loss = self.loss_at(&probe)?;
                if best_probe.as_ref().map_or(true, |(_, l)| loss > *l) {
                    best_probe = Some((probe, loss));
                }
            }
        }
        if let Some((probe, probe_loss)) = best_probe {
            if probe_loss > best_loss {
                best_delta = probe.clone();
                best_loss = probe_loss;
            }
            let (refined, refined_loss) = self.ascend(&probe, steps, step)?;
            if refined_loss > best_loss {
                best_delta = refined;
                best_loss = refined_loss;
            }
        }
        Ok((best_delta, best_loss))
    }
}

/// Worst-case individual in the uncertainty set for a fixed action:
/// projected gradient ascent over the additive intervention, starting at
/// zero. A local maximizer only; no global certificate for nonconvex
/// classifiers.
pub fn inner_maximize<R: Real, S: Scorer<R>>(
    classifier: &S,
    scm: &Scm<R>,
    x: &[R],
    action: &RecourseAction<R>,
    unc: &UncertaintySpec,
    steps: usize,
    step_size: R,
) -> Result<InnerMaxResult<R>, RecourseError> {
    let eps = unc.epsilon::<R>();
    if eps == R::zero() {
        let delta = vec![R::zero(); scm.n()];
        let x_star = x.to_vec();
        let score = classifier.score(&x_star);
        return Ok(InnerMaxResult {
            delta,
            x_star,
            loss: -score.ln(),
        });
    }
    let u = scm.abduct(x)?;
    let mut ctx = InnerContext::new(
        classifier,
        scm,
        &u,
        action.intervened(),
        action.theta(),
        eps,
    )?;
    let zero = vec![R::zero(); scm.n()];
    let (delta, loss) = ctx.ascend(&zero, steps, step_size)?;
    let x_star = scm.counterfactual_additive(x, &delta)?;
    Ok(InnerMaxResult {
        delta,
        x_star,
        loss,
    })
}

/// Min-max projected gradient recourse for differentiable classifiers.
///
/// Every inner step recomputes the worst-case individual for the current
/// shift vector, exits with the current action once that worst case is
/// favorably classified, and otherwise descends on
/// `cost(theta) + lambda * bce(h~(CF(x*, a)), 1)` followed by projection
/// onto the feasible box. `lambda` is multiplied by `gamma` each outer
/// round; `NotFound` after `n_max` rounds. With `eps = 0` the inner
/// maximization is trivial and this is the standard causal recourse
/// procedure. Certification is best-effort (local inner maximum); callers
/// judging robustness should re-attack the returned action.
pub fn robust_recourse_pgd<R: Real, S: Scorer<R>>(
    classifier: &S,
    scm: &Scm<R>,
    x: &[R],
    feas: &FeasibilitySpec,
    unc: &UncertaintySpec,
    cost: &CostFn,
    params: &PgdParams,
) -> Result<RecourseOutcome<R>, RecourseError> {
    let intervened = feas.actionable_indices();
    let eps = unc.epsilon::<R>();
    let n = scm.n();
    let u = scm.abduct(x)?;
    let m = intervened.len();

    // Constraint-loss tape: theta are leaves; the worst-case delta and
    // lambda are settable constants. The nonsmooth cost term is handled by
    // its proximal map in the update below rather than by a subgradient.
    let mut tape = Tape::new();
    let theta_nodes: Vec<NodeId> = (0..m).map(|_| tape.leaf_scalar(R::zero())).collect();
    let delta_inputs: Vec<NodeId> = (0..n).map(|_| tape.constant_scalar(R::zero())).collect();
    let (weighted_loss, lambda_node) = {
        let cf = scm.counterfactual_nodes(
            &mut tape,
            &u,
            Some(&delta_inputs),
            Some((&intervened, &theta_nodes)),
        )?;
        let xvec = tape.stack(&cf)?;
        let score = classifier.score_node(&mut tape, xvec)?;
        let lg = tape.log(score);
        let loss = tape.scale(lg, -R::one());
        let lambda_node = tape.constant_scalar(real(params.lambda0));
        (tape.mul(lambda_node, loss)?, lambda_node)
    };

    let mut inner = if eps > R::zero() {
        Some(InnerContext::new(
            classifier,
            scm,
            &u,
            &intervened,
            &vec![R::zero(); m],
            eps,
        )?)
    } else {
        None
    };

    let mut theta = vec![R::zero(); m];
    let mut lambda = real::<R>(params.lambda0);
    let alpha = real::<R>(params.alpha);
    let tol = real::<R>(params.converge_tol);
    let pga_step = eps * real::<R>(params.pga_step_frac);
    let zero_delta = vec![R::zero(); n];

    for round in 0..params.n_max {
        for step in 0..params.inner_steps {
            let delta_star: Vec<R> = match inner.as_mut() {
                Some(ctx) => {
                    ctx.set_theta(&theta)?;
                    ctx.worst_case(params.pga_steps, pga_step)?.0
                }
                None => zero_delta.clone(),
            };

            let action = RecourseAction::new(intervened.clone(), theta.clone())?;
            let worst = scm.apply_action_to_perturbed(x, &delta_star, &action)?;
            if classifier.decide(&worst) {
                let cost_value = action.cost(cost);
                return Ok(RecourseOutcome::Found(FoundRecourse {
                    action,
                    cost: cost_value,
                    tight: false,
                    rounds: round,
                }));
            }

            for (&node, &t) in theta_nodes.iter().zip(&theta) {
                tape.set_input(node, &[t])?;
            }
            for (&node, &d) in delta_inputs.iter().zip(&delta_star) {
                tape.set_input(node, &[d])?;
            }
            tape.set_input(lambda_node, &[lambda])?;
            tape.replay();

            let grads = tape.gradient(weighted_loss, &theta_nodes)?;
            let mut next = theta.clone();
            for (k, g) in grads.iter().enumerate() {
                let gv = g.data[0];
                if !gv.is_finite() {
                    return Err(RecourseError::NonFiniteGradient { round, step });
                }
                next[k] = cost.prox(next[k] - alpha * gv, alpha);
            }
            feas.project(x, &intervened, &mut next);
            let moved: Vec<R> = next.iter().zip(&theta).map(|(&a, &b)| a - b).collect();
            theta = next;
            if norm_inf(&moved) < tol {
                break;
            }
        }
        lambda = lambda * real::<R>(params.gamma);
    }
    Ok(RecourseOutcome::NotFound)
}

/// Route to the closed form when both the classifier and the SCM are
/// linear, otherwise to the projected-gradient solver.
pub fn generate_recourse<R: Real, S: Scorer<R>>(
    classifier: &S,
    scm: &Scm<R>,
    x: &[R],
    feas: &FeasibilitySpec,
    unc: &UncertaintySpec,
    cost: &CostFn,
    params: &PgdParams,
) -> Result<RecourseOutcome<R>, RecourseError> {
    if classifier.linear_halfspace().is_some() && scm.is_linear() {
        robust_linear_recourse(classifier, scm, x, feas, unc, cost)
    } else {
        robust_recourse_pgd(classifier, scm, x, feas, unc, cost, params)
    }
}

/// Upper bound on the relative extra cost of robustifying a valid standard
/// recourse action (linear classifier): `eps * ||J^T w||_2 / <w, J theta>`,
/// plus the masked split form on independently-manipulable-feature models.
#[derive(Debug, Clone, Copy)]
pub struct CostBound<R> {
    pub causal: R,
    pub masked_imf: Option<R>,
}

pub fn cost_bound_beta<R: Real, S: Scorer<R>>(
    classifier: &S,
    scm: &Scm<R>,
    x: &[R],
    action: &RecourseAction<R>,
    mask: &crate::model::ActionabilityMask<R>,
    unc: &UncertaintySpec,
) -> Result<CostBound<R>, RecourseError> {
    let (w, _) = classifier.linear_halfspace().ok_or(RecourseError::NotLinear)?;
    if !scm.is_linear() {
        return Err(RecourseError::NotLinear);
    }
    let n = scm.n();
    let eps = unc.epsilon::<R>();
    let jtw = jacobian_transpose_w(scm, x, action.intervened(), &w)?;
    let theta_full = action.embed(n);
    let j = scm.interventional_jacobian(x, action.intervened())?;
    let j_theta: Vec<R> = (0..n)
        .map(|i| (0..n).map(|c| j[i][c] * theta_full[c]).sum())
        .collect();
    let denom = dot(&w, &j_theta);
    if denom <= R::zero() {
        return Err(RecourseError::InvalidBaseAction(
            denom.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let causal = eps * norm2(&jtw) / denom;

    let masked_imf = if scm.is_imf() {
        let ma = mask.actionable();
        let mu: Vec<R> = mask.complement();
        let wa: Vec<R> = w.iter().zip(ma).map(|(&wi, &m)| wi * m).collect();
        let wu: Vec<R> = w.iter().zip(&mu).map(|(&wi, &m)| wi * m).collect();
        let denom_masked = dot(&wa, &theta_full);
        (denom_masked > R::zero())
            .then(|| eps * (norm2(&wa) + norm2(&wu)) / denom_masked)
    } else {
        None
    };

    Ok(CostBound { causal, masked_imf })
}
