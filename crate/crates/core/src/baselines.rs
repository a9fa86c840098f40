//! Comparison agents: the optimistic dual softmax method without a safe
//! policy, the DOPE extended-LP method and the uniform policy.

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Deployment, KnownModel};
use crate::cmdp::{ExplicitPolicy, SafePolicyOracle, Transition};
use crate::error::{Error, Result};
use crate::estimator::EstimatorState;
use crate::lpsolve::{dope_policy, DopeProblem, TransitionCounts};
use crate::opse::{bisect_from, fit, materialize, ChoiceKind, HeadParams, PolicyChoice, UtilityBonus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GhoshConfig {
    pub rho: f64,
    pub c_r: f64,
    /// Optimistic utility bonus scaler.
    pub c_u: f64,
    pub kappa: f64,
    pub bisection_iters: usize,
    pub lambda_max: f64,
}

impl Default for GhoshConfig {
    fn default() -> Self {
        Self::tabular()
    }
}

impl GhoshConfig {
    pub fn tabular() -> Self {
        Self {
            rho: 1.0,
            c_r: 1.0,
            c_u: 1.0,
            kappa: 0.1,
            bisection_iters: 20,
            lambda_max: 300.0,
        }
    }

    pub fn streaming() -> Self {
        Self {
            c_r: 2.0,
            c_u: 2.0,
            ..Self::tabular()
        }
    }

    pub fn head_params(&self) -> HeadParams {
        HeadParams {
            c_r: self.c_r,
            c_u: self.c_u,
            c_dagger: 0.0,
            b_dagger: 0.0,
            kappa: self.kappa,
            utility_bonus: UtilityBonus::Optimistic,
            lambda_max: self.lambda_max,
            bisection_iters: self.bisection_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_r >= 0.0 && self.c_u >= 0.0 && self.c_r.is_finite() && self.c_u.is_finite()) {
            return Err(Error::invalid("bonus scalers must be finite and nonnegative"));
        }
        if !(self.kappa > 0.0 && self.lambda_max > 0.0 && self.rho > 0.0) {
            return Err(Error::invalid("kappa, lambda_max and rho must be positive"));
        }
        if self.bisection_iters == 0 {
            return Err(Error::invalid("at least one bisection iteration is required"));
        }
        Ok(())
    }
}

/// Multiplier search on optimistic heads: `lambda = 0` when its optimistic
/// utility clears the threshold, otherwise bisection, and `pi^(k, lambda_max)`
/// when even that falls short.
pub fn ghosh_select_policy(est: &EstimatorState, model: &KnownModel, params: &HeadParams) -> Result<PolicyChoice> {
    let b = model.threshold;
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
    let (high_weights, high_value) = fit(est, model, params, params.lambda_max)?;
    if high_value < b {
        return Ok(PolicyChoice {
            kind: ChoiceKind::MaxMultiplier,
            lambda: params.lambda_max,
            utility_at_s1: high_value,
            weights: Some(high_weights),
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

#[derive(Debug, Clone)]
pub struct GhoshAgent {
    model: KnownModel,
    params: HeadParams,
    estimator: EstimatorState,
    last_choice: Option<PolicyChoice>,
}

impl GhoshAgent {
    pub fn new(model: KnownModel, cfg: &GhoshConfig) -> Result<Self> {
        cfg.validate()?;
        let estimator = EstimatorState::new(model.features.clone(), model.horizon, cfg.rho)?;
        Ok(Self {
            params: cfg.head_params(),
            model,
            estimator,
            last_choice: None,
        })
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn params(&self) -> &HeadParams {
        &self.params
    }

    pub fn last_choice(&self) -> Option<&PolicyChoice> {
        self.last_choice.as_ref()
    }
}

impl Agent for GhoshAgent {
    fn name(&self) -> &'static str {
        "ghosh"
    }

    fn act(&mut self) -> Result<Deployment> {
        let choice = ghosh_select_policy(&self.estimator, &self.model, &self.params)?;
        let weights = choice.weights.as_ref().expect("every branch returns weights");
        let deployment = Deployment {
            policy: materialize(weights, &self.estimator, &self.model),
            lambda: choice.lambda,
            safe: false,
            estimated_utility: Some(choice.utility_at_s1),
        };
        self.last_choice = Some(choice);
        Ok(deployment)
    }

    fn observe(&mut self, trajectory: &[Transition]) -> Result<()> {
        self.estimator.record_episode(trajectory)
    }
}

pub fn uniform_policy(horizon: usize, num_states: usize, num_actions: usize) -> ExplicitPolicy {
    ExplicitPolicy::uniform(horizon, num_states, num_actions)
}

#[derive(Debug, Clone)]
pub struct UniformAgent {
    policy: ExplicitPolicy,
}

impl UniformAgent {
    pub fn new(model: &KnownModel) -> Self {
        Self {
            policy: uniform_policy(model.horizon, model.num_states(), model.num_actions()),
        }
    }
}

impl Agent for UniformAgent {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn act(&mut self) -> Result<Deployment> {
        Ok(Deployment {
            policy: self.policy.clone(),
            lambda: 0.0,
            safe: false,
            estimated_utility: None,
        })
    }

    fn observe(&mut self, _trajectory: &[Transition]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DopeConfig {
    pub c_r: f64,
    pub c_u: f64,
}

impl Default for DopeConfig {
    fn default() -> Self {
        Self { c_r: 1.0, c_u: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct DopeAgent {
    model: KnownModel,
    cfg: DopeConfig,
    counts: TransitionCounts,
    safe: SafePolicyOracle,
    infeasible_episodes: usize,
}

impl DopeAgent {
    /// Fails with [`Error::UnsupportedEnvironment`] unless the features are
    /// the one-hot encoding of `(s, a)`.
    pub fn new(model: KnownModel, cfg: &DopeConfig, safe: SafePolicyOracle) -> Result<Self> {
        if !is_one_hot(&model) {
            return Err(Error::UnsupportedEnvironment(
                "DOPE needs a tabular environment with one-hot features".into(),
            ));
        }
        if !(cfg.c_r >= 0.0 && cfg.c_u >= 0.0) {
            return Err(Error::invalid("bonus scalers must be nonnegative"));
        }
        let counts = TransitionCounts::new(model.horizon, model.num_states(), model.num_actions());
        Ok(Self {
            model,
            cfg: cfg.clone(),
            counts,
            safe,
            infeasible_episodes: 0,
        })
    }

    pub fn counts(&self) -> &TransitionCounts {
        &self.counts
    }

    /// Episodes in which the LP was infeasible and the safe policy was played.
    pub fn infeasible_episodes(&self) -> usize {
        self.infeasible_episodes
    }
}

fn is_one_hot(model: &KnownModel) -> bool {
    let (ns, na, d) = model.features.dim();
    d == ns * na
        && model
            .features
            .indexed_iter()
            .all(|((s, a, i), &v)| v == if i == s * na + a { 1.0 } else { 0.0 })
}

impl Agent for DopeAgent {
    fn name(&self) -> &'static str {
        "dope"
    }

    fn act(&mut self) -> Result<Deployment> {
        let problem = DopeProblem {
            counts: &self.counts,
            reward: self.model.reward.view(),
            utility: self.model.utility.view(),
            initial_state: self.model.initial_state,
            threshold: self.model.threshold,
            c_r: self.cfg.c_r,
            c_u: self.cfg.c_u,
        };
        match dope_policy(&problem) {
            Ok(solution) => Ok(Deployment {
                policy: solution.policy,
                lambda: solution.lambda,
                safe: false,
                estimated_utility: Some(self.model.threshold + solution.constraint_margin),
            }),
            Err(Error::Infeasible) => {
                self.infeasible_episodes += 1;
                Ok(Deployment {
                    policy: self.safe.policy.clone(),
                    lambda: 0.0,
                    safe: true,
                    estimated_utility: None,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn observe(&mut self, trajectory: &[Transition]) -> Result<()> {
        self.counts.record(trajectory)
    }
}
