//! Optimistic-pessimistic softmax exploration for linear CMDPs.
//!
//! Each episode the agent builds three clipped value heads by least-squares
//! backups (an optimistic entropy-regularized reward head, a pessimistic
//! utility head and an optimistic compensation head), mixes them into a
//! softmax policy indexed by a multiplier `lambda`, and searches `lambda` by
//! bisection so that the pessimistic utility at `s1` clears the threshold.
//! When even the largest multiplier fails, the known safe policy is played.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Deployment, KnownModel};
use crate::cmdp::{log_softmax_into, ExplicitPolicy, LinearCmdp, SafePolicyOracle, Transition};
use crate::error::{Error, Result};
use crate::estimator::EstimatorState;
use crate::harness::{simulate, MetricsLog, SimulationOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpseConfig {
    pub rho: f64,
    /// Optimistic reward bonus scaler.
    pub c_r: f64,
    /// Pessimistic utility bonus scaler.
    pub c_u: f64,
    pub c_dagger: f64,
    pub b_dagger: f64,
    pub kappa: f64,
    /// Number of bisection halvings.
    pub bisection_iters: usize,
    pub lambda_max: f64,
    pub episodes: usize,
    /// Confidence level; only recorded.
    pub delta: f64,
    pub seed: u64,
}

impl Default for OpseConfig {
    fn default() -> Self {
        Self::tabular()
    }
}

impl OpseConfig {
    pub fn tabular() -> Self {
        Self {
            rho: 1.0,
            c_r: 1.0,
            c_u: 1.0,
            c_dagger: 1.0,
            b_dagger: 1.0,
            kappa: 0.1,
            bisection_iters: 20,
            lambda_max: 300.0,
            episodes: 20_000,
            delta: 0.05,
            seed: 0,
        }
    }

    pub fn streaming() -> Self {
        Self {
            c_r: 2.0,
            c_u: 2.0,
            c_dagger: 2.0,
            ..Self::tabular()
        }
    }

    pub fn linear() -> Self {
        Self {
            episodes: 5_000,
            ..Self::tabular()
        }
    }

    /// Scalers from the worst-case analysis with logarithmic factors folded
    /// into `iota = ln(K H / delta)`. Numerically unwieldy at desk scale.
    pub fn theory(dim: usize, horizon: usize, episodes: usize, delta: f64, slack: f64) -> Self {
        let (d, h, k) = (dim as f64, horizon as f64, episodes as f64);
        let iota = (k * h / delta).ln();
        let bonus = d * h * iota.sqrt();
        Self {
            rho: 1.0,
            c_r: bonus,
            c_u: bonus,
            c_dagger: d * d * h.powi(3) * iota / slack,
            b_dagger: d * h * h * iota / slack,
            kappa: slack.powi(3) / (h.powi(4) * d * k.sqrt()),
            bisection_iters: (h * iota).ceil() as usize,
            lambda_max: d * h.powi(4) * iota / (slack * slack),
            episodes,
            delta,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalers = [self.c_r, self.c_u, self.c_dagger, self.b_dagger];
        if scalers.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::invalid("bonus scalers must be finite and nonnegative"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("kappa must be positive"));
        }
        if self.bisection_iters == 0 {
            return Err(Error::invalid("at least one bisection iteration is required"));
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::invalid("lambda_max must be positive"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("rho must be positive"));
        }
        if self.episodes == 0 {
            return Err(Error::invalid("episode budget must be at least 1"));
        }
        Ok(())
    }

    pub fn head_params(&self) -> HeadParams {
        HeadParams {
            c_r: self.c_r,
            c_u: self.c_u,
            c_dagger: self.c_dagger,
            b_dagger: self.b_dagger,
            kappa: self.kappa,
            utility_bonus: UtilityBonus::Pessimistic,
            lambda_max: self.lambda_max,
            bisection_iters: self.bisection_iters,
        }
    }
}

/// Sign of the bonus inside the utility head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtilityBonus {
    /// `u + clip(-C_u beta + P V, 0, H - h)`
    Pessimistic,
    /// `u + clip(+C_u beta + P V, 0, H - h)`
    Optimistic,
}

/// Everything that shapes the heads and the multiplier search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    pub c_r: f64,
    pub c_u: f64,
    pub c_dagger: f64,
    pub b_dagger: f64,
    pub kappa: f64,
    pub utility_bonus: UtilityBonus,
    pub lambda_max: f64,
    pub bisection_iters: usize,
}

/// Regression weights of the three heads at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWeights {
    pub reward: Array1<f64>,
    pub utility: Array1<f64>,
    pub dagger: Array1<f64>,
}

impl StepWeights {
    fn zeros(dim: usize) -> Self {
        Self {
            reward: Array1::zeros(dim),
            utility: Array1::zeros(dim),
            dagger: Array1::zeros(dim),
        }
    }
}

/// Finite representation of the heads, and hence of the softmax policy,
/// for one multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub steps: Vec<StepWeights>,
    pub lambda: f64,
    pub params: HeadParams,
    /// Number of episodes in the estimator the weights were fitted on.
    pub episodes: usize,
}

/// Head values and the induced policy at one `(h, s)`.
#[derive(Debug, Clone)]
pub struct HeadRow {
    pub q_reward: Vec<f64>,
    pub q_utility: Vec<f64>,
    pub q_dagger: Vec<f64>,
    pub policy: Vec<f64>,
    log_policy: Vec<f64>,
    logits: Vec<f64>,
}

impl HeadRow {
    pub fn new(num_actions: usize) -> Self {
        Self {
            q_reward: vec![0.0; num_actions],
            q_utility: vec![0.0; num_actions],
            q_dagger: vec![0.0; num_actions],
            policy: vec![0.0; num_actions],
            log_policy: vec![0.0; num_actions],
            logits: vec![0.0; num_actions],
        }
    }

    /// `pi (Q_r - kappa ln pi)`
    pub fn reward_value(&self, kappa: f64) -> f64 {
        self.policy
            .iter()
            .zip(&self.q_reward)
            .zip(&self.log_policy)
            .map(|((p, q), lp)| p * (q - kappa * lp))
            .sum()
    }

    pub fn utility_value(&self) -> f64 {
        self.policy.iter().zip(&self.q_utility).map(|(p, q)| p * q).sum()
    }

    pub fn dagger_value(&self) -> f64 {
        self.policy.iter().zip(&self.q_dagger).map(|(p, q)| p * q).sum()
    }
}

/// Fills `row` with the clipped heads at `(h, s)` and the composite softmax.
pub fn evaluate_heads(
    est: &EstimatorState,
    model: &KnownModel,
    params: &HeadParams,
    weights: &StepWeights,
    lambda: f64,
    h: usize,
    s: usize,
    row: &mut HeadRow,
) {
    let num_actions = model.num_actions();
    let remaining = (model.horizon - 1 - h) as f64;
    let reward_cap = remaining * (1.0 + params.kappa * (num_actions as f64).ln());
    let utility_cap = remaining;
    let dagger_cap = params.b_dagger * remaining;
    let utility_sign = match params.utility_bonus {
        UtilityBonus::Pessimistic => -1.0,
        UtilityBonus::Optimistic => 1.0,
    };
    for a in 0..num_actions {
        let beta = est.cached_bonus(h, s, a);
        let phi = est.feature(s, a);
        row.q_reward[a] =
            model.reward[[h, s, a]] + (params.c_r * beta + phi.dot(&weights.reward)).clamp(0.0, reward_cap);
        row.q_utility[a] = model.utility[[h, s, a]]
            + (utility_sign * params.c_u * beta + phi.dot(&weights.utility)).clamp(0.0, utility_cap);
        row.q_dagger[a] =
            params.b_dagger * beta + (params.c_dagger * beta + phi.dot(&weights.dagger)).clamp(0.0, dagger_cap);
        row.logits[a] = row.q_dagger[a] + row.q_reward[a] + lambda * row.q_utility[a];
    }
    log_softmax_into(&row.logits, params.kappa, &mut row.log_policy);
    for (p, lp) in row.policy.iter_mut().zip(&row.log_policy) {
        *p = lp.exp();
    }
}

/// Backward pass from `h = H` down to `1`, regressing each head's value at
/// the observed next states onto the features.
pub fn backward_pass(
    est: &EstimatorState,
    model: &KnownModel,
    params: &HeadParams,
    lambda: f64,
) -> Result<HeadWeights> {
    if !(0.0..=params.lambda_max).contains(&lambda) {
        return Err(Error::invalid(format!(
            "lambda {lambda} outside [0, {}]",
            params.lambda_max
        )));
    }
    let horizon = model.horizon;
    let mut steps: Vec<StepWeights> = (0..horizon).map(|_| StepWeights::zeros(model.dim())).collect();
    let mut row = HeadRow::new(model.num_actions());
    let mut v_r = Vec::new();
    let mut v_u = Vec::new();
    let mut v_d = Vec::new();
    for h in (0..horizon.saturating_sub(1)).rev() {
        v_r.clear();
        v_u.clear();
        v_d.clear();
        for next in est.next_states(h) {
            evaluate_heads(est, model, params, &steps[h + 1], lambda, h + 1, next, &mut row);
            v_r.push(row.reward_value(params.kappa));
            v_u.push(row.utility_value());
            v_d.push(row.dagger_value());
        }
        steps[h] = StepWeights {
            reward: est.solve(h, est.grouped_rhs(h, &v_r).view()),
            utility: est.solve(h, est.grouped_rhs(h, &v_u).view()),
            dagger: est.solve(h, est.grouped_rhs(h, &v_d).view()),
        };
    }
    Ok(HeadWeights {
        steps,
        lambda,
        params: *params,
        episodes: est.episodes(),
    })
}

/// Heads and policy at `(h = 1, s1)` for the given weights.
pub fn heads_at_initial_state(weights: &HeadWeights, est: &EstimatorState, model: &KnownModel) -> HeadRow {
    let mut row = HeadRow::new(model.num_actions());
    evaluate_heads(
        est,
        model,
        &weights.params,
        &weights.steps[0],
        weights.lambda,
        0,
        model.initial_state,
        &mut row,
    );
    row
}

/// Utility-head value of `pi^(k, lambda)` at `s1`. With pessimistic params
/// this is the quantity compared against the threshold.
pub fn pessimistic_utility_at_s1(weights: &HeadWeights, est: &EstimatorState, model: &KnownModel) -> f64 {
    heads_at_initial_state(weights, est, model).utility_value()
}

/// Evaluates the softmax policy at every enumerated state.
pub fn materialize(weights: &HeadWeights, est: &EstimatorState, model: &KnownModel) -> ExplicitPolicy {
    let (ns, na) = (model.num_states(), model.num_actions());
    let mut probs = Array3::<f64>::zeros((model.horizon, ns, na));
    let mut row = HeadRow::new(na);
    for h in 0..model.horizon {
        for s in 0..ns {
            evaluate_heads(est, model, &weights.params, &weights.steps[h], weights.lambda, h, s, &mut row);
            for a in 0..na {
                probs[[h, s, a]] = row.policy[a];
            }
        }
    }
    ExplicitPolicy::from_rows_unchecked(probs)
}

pub(crate) fn fit(est: &EstimatorState, model: &KnownModel, params: &HeadParams, lambda: f64) -> Result<(HeadWeights, f64)> {
    let weights = backward_pass(est, model, params, lambda)?;
    let value = pessimistic_utility_at_s1(&weights, est, model);
    Ok((weights, value))
}

/// One probe of the multiplier search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectionStep {
    pub lambda: f64,
    pub utility: f64,
    /// Bracket after this probe.
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct BisectionOutcome {
    pub upper: f64,
    pub lower: f64,
    pub upper_utility: f64,
    pub upper_weights: HeadWeights,
    pub steps: Vec<BisectionStep>,
}

/// Halves `[0, lambda_max]` `T` times keeping `V(upper) >= b > V(lower)`.
/// Requires `V(0) < b <= V(lambda_max)`.
pub fn bisection(est: &EstimatorState, model: &KnownModel, params: &HeadParams) -> Result<BisectionOutcome> {
    let (_, low_value) = fit(est, model, params, 0.0)?;
    let (high_weights, high_value) = fit(est, model, params, params.lambda_max)?;
    if !(low_value < model.threshold && high_value >= model.threshold) {
        return Err(Error::Internal(format!(
            "bisection requires V(0) < b <= V(lambda_max); got V(0) = {low_value}, V(max) = {high_value}, b = {}",
            model.threshold
        )));
    }
    bisect_from(est, model, params, high_weights, high_value)
}

pub(crate) fn bisect_from(
    est: &EstimatorState,
    model: &KnownModel,
    params: &HeadParams,
    mut upper_weights: HeadWeights,
    mut upper_utility: f64,
) -> Result<BisectionOutcome> {
    let mut lower = 0.0;
    let mut upper = params.lambda_max;
    let mut steps = Vec::with_capacity(params.bisection_iters);
    for _ in 0..params.bisection_iters {
        let mid = 0.5 * (lower + upper);
        let (weights, utility) = fit(est, model, params, mid)?;
        if utility >= model.threshold {
            upper = mid;
            upper_weights = weights;
            upper_utility = utility;
        } else {
            lower = mid;
        }
        steps.push(BisectionStep {
            lambda: mid,
            utility,
            lower,
            upper,
        });
    }
    Ok(BisectionOutcome {
        upper,
        lower,
        upper_utility,
        upper_weights,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoiceKind {
    SafePolicy,
    /// The `lambda = 0` softmax already clears the threshold.
    SoftmaxUnconstrained,
    SoftmaxBisection,
    /// `pi^(k, lambda_max)` played even though its utility head is below the
    /// threshold; only agents without a safe policy do this.
    MaxMultiplier,
}

#[derive(Debug, Clone)]
pub struct PolicyChoice {
    pub kind: ChoiceKind,
    /// 0 for the safe policy.
    pub lambda: f64,
    /// Utility head at `s1` of the softmax deployed, or of `pi^(k, lambda_max)`
    /// when falling back to the safe policy.
    pub utility_at_s1: f64,
    pub weights: Option<HeadWeights>,
    pub bisection: Option<Vec<BisectionStep>>,
}

/// Safe-policy trigger, then the `lambda = 0` shortcut, then bisection.
pub fn select_policy(est: &EstimatorState, model: &KnownModel, params: &HeadParams) -> Result<PolicyChoice> {
    let b = model.threshold;
    let (high_weights, high_value) = fit(est, model, params, params.lambda_max)?;
    if high_value < b {
        return Ok(PolicyChoice {
            kind: ChoiceKind::SafePolicy,
            lambda: 0.0,
            utility_at_s1: high_value,
            weights: None,
            bisection: None,
        });
    }
    let (zero_weights, zero_value) = fit(est, model, params, 0.0)?;
    if zero_value >= b {
        return Ok(PolicyChoice {
            kind: ChoiceKind::SoftmaxUnconstrained,
            lambda: 0.0,
            utility_at_s1: zero_value,
            weights: Some(zero_weights),
            bisection: None,
        });
    }
    let outcome = bisect_from(est, model, params, high_weights, high_value)?;
    Ok(PolicyChoice {
        kind: ChoiceKind::SoftmaxBisection,
        lambda: outcome.upper,
        utility_at_s1: outcome.upper_utility,
        weights: Some(outcome.upper_weights),
        bisection: Some(outcome.steps),
    })
}

/// The learning agent; owns its estimator.
#[derive(Debug, Clone)]
pub struct OpseAgent {
    model: KnownModel,
    params: HeadParams,
    estimator: EstimatorState,
    safe: SafePolicyOracle,
    last_choice: Option<PolicyChoice>,
}

impl OpseAgent {
    pub fn new(model: KnownModel, cfg: &OpseConfig, safe: SafePolicyOracle) -> Result<Self> {
        cfg.validate()?;
        let estimator = EstimatorState::new(model.features.clone(), model.horizon, cfg.rho)?;
        Ok(Self {
            params: cfg.head_params(),
            model,
            estimator,
            safe,
            last_choice: None,
        })
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn model(&self) -> &KnownModel {
        &self.model
    }

    pub fn params(&self) -> &HeadParams {
        &self.params
    }

    pub fn last_choice(&self) -> Option<&PolicyChoice> {
        self.last_choice.as_ref()
    }
}

impl Agent for OpseAgent {
    fn name(&self) -> &'static str {
        "opse"
    }

    fn act(&mut self) -> Result<Deployment> {
        let choice = select_policy(&self.estimator, &self.model, &self.params)?;
        let deployment = match &choice.weights {
            None => Deployment {
                policy: self.safe.policy.clone(),
                lambda: 0.0,
                safe: true,
                estimated_utility: None,
            },
            Some(weights) => Deployment {
                policy: materialize(weights, &self.estimator, &self.model),
                lambda: choice.lambda,
                safe: false,
                estimated_utility: Some(choice.utility_at_s1),
            },
        };
        self.last_choice = Some(choice);
        Ok(deployment)
    }

    fn observe(&mut self, trajectory: &[Transition]) -> Result<()> {
        self.estimator.record_episode(trajectory)
    }
}

/// Runs the agent for `cfg.episodes` episodes against the true environment.
pub fn run(cmdp: &LinearCmdp, cfg: &OpseConfig, safe: &SafePolicyOracle) -> Result<MetricsLog> {
    let mut agent = OpseAgent::new(KnownModel::from(cmdp), cfg, safe.clone())?;
    let options = SimulationOptions {
        episodes: cfg.episodes,
        seed: cfg.seed,
        ..SimulationOptions::default()
    };
    simulate(cmdp, &mut agent, &options)
}

/// Exact-backup analogue of the composite softmax: true transitions, no
/// bonuses, no clipping and no compensation head. The result is the soft
/// optimal policy for `r + lambda u` at temperature `kappa`.
pub fn exact_composite_softmax(cmdp: &LinearCmdp, kappa: f64, lambda: f64) -> Result<ExplicitPolicy> {
    if !(kappa > 0.0) {
        return Err(Error::invalid("kappa must be positive"));
    }
    let (horizon, ns, na) = (cmdp.horizon(), cmdp.num_states(), cmdp.num_actions());
    let reward = cmdp.reward();
    let utility = cmdp.utility();
    let mut v_r = Array1::<f64>::zeros(ns);
    let mut v_u = Array1::<f64>::zeros(ns);
    let mut probs = Array3::<f64>::zeros((horizon, ns, na));
    let mut q = Array2::<f64>::zeros((2, na));
    let mut logits = vec![0.0; na];
    let mut log_pi = vec![0.0; na];
    for h in (0..horizon).rev() {
        let mut next_r = Array1::<f64>::zeros(ns);
        let mut next_u = Array1::<f64>::zeros(ns);
        for s in 0..ns {
            for a in 0..na {
                let p = cmdp.next_state_distribution(h, s, a);
                q[[0, a]] = reward[[h, s, a]] + p.dot(&v_r);
                q[[1, a]] = utility[[h, s, a]] + p.dot(&v_u);
                logits[a] = q[[0, a]] + lambda * q[[1, a]];
            }
            log_softmax_into(&logits, kappa, &mut log_pi);
            for a in 0..na {
                let pi = log_pi[a].exp();
                probs[[h, s, a]] = pi;
                next_r[s] += pi * (q[[0, a]] - kappa * log_pi[a]);
                next_u[s] += pi * q[[1, a]];
            }
        }
        v_r = next_r;
        v_u = next_u;
    }
    Ok(ExplicitPolicy::from_rows_unchecked(probs))
}
