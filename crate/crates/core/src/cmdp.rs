//! Ground-truth finite-horizon constrained MDPs with a linear feature map.
//!
//! Everything here is exact: policies are explicit per-step action tables and
//! values are computed by backward induction over the true transition kernel.
//! Steps are zero-based in code (`0..horizon`), states and actions are dense
//! indices.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-10;
const POLICY_TOL: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-9;

/// A finite-horizon CMDP whose reward and utility are linear in a known
/// feature map: `r_h(s,a) = theta_r[h] . phi(s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCmdp {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    dim: usize,
    /// `(S, A, d)`
    features: Array3<f64>,
    /// `(H, S, A, S)`
    transitions: Array4<f64>,
    /// `(H, d)`
    theta_r: Array2<f64>,
    theta_u: Array2<f64>,
    threshold: f64,
    initial_state: usize,
    reward: Array3<f64>,
    utility: Array3<f64>,
}

impl LinearCmdp {
    pub fn new(
        features: Array3<f64>,
        transitions: Array4<f64>,
        theta_r: Array2<f64>,
        theta_u: Array2<f64>,
        threshold: f64,
        initial_state: usize,
    ) -> Result<Self> {
        let (num_states, num_actions, dim) = features.dim();
        let (horizon, s1, a1, s2) = transitions.dim();
        if horizon == 0 || num_states == 0 || num_actions == 0 || dim == 0 {
            return Err(Error::invalid("empty horizon, state, action or feature set"));
        }
        if (s1, a1, s2) != (num_states, num_actions, num_states) {
            return Err(Error::invalid(format!(
                "transition table shape {:?} does not match {} states x {} actions",
                transitions.dim(),
                num_states,
                num_actions
            )));
        }
        if theta_r.dim() != (horizon, dim) || theta_u.dim() != (horizon, dim) {
            return Err(Error::invalid("theta tables must be horizon x d"));
        }
        if initial_state >= num_states {
            return Err(Error::invalid(format!("initial state {initial_state} out of range")));
        }
        if !(threshold.is_finite() && (0.0..=horizon as f64).contains(&threshold)) {
            return Err(Error::invalid(format!("threshold {threshold} outside [0, H]")));
        }
        if features.iter().chain(theta_r.iter()).chain(theta_u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature or theta entry"));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let norm = features.slice(ndarray::s![s, a, ..]).dot(&features.slice(ndarray::s![s, a, ..]));
                if norm.sqrt() > 1.0 + UNIT_TOL {
                    return Err(Error::invalid(format!("feature norm of ({s},{a}) exceeds 1")));
                }
            }
        }
        for (h, s, a) in ndarray::indices((horizon, num_states, num_actions)) {
            let row = transitions.slice(ndarray::s![h, s, a, ..]);
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid(format!("negative transition probability at ({h},{s},{a})")));
            }
            let total: f64 = row.sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::invalid(format!(
                    "transition row ({h},{s},{a}) sums to {total}"
                )));
            }
        }

        let reward = linear_table(&features, &theta_r);
        let utility = linear_table(&features, &theta_u);
        for (name, table) in [("reward", &reward), ("utility", &utility)] {
            if table.iter().any(|&v| !(-UNIT_TOL..=1.0 + UNIT_TOL).contains(&v)) {
                return Err(Error::invalid(format!("{name} outside [0, 1]")));
            }
        }

        Ok(Self {
            horizon,
            num_states,
            num_actions,
            dim,
            features,
            transitions,
            theta_r,
            theta_u,
            threshold,
            initial_state,
            reward,
            utility,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn features(&self) -> ArrayView3<'_, f64> {
        self.features.view()
    }

    pub fn feature(&self, s: usize, a: usize) -> ArrayView1<'_, f64> {
        self.features.slice(ndarray::s![s, a, ..])
    }

    pub fn transitions(&self) -> &Array4<f64> {
        &self.transitions
    }

    pub fn next_state_distribution(&self, h: usize, s: usize, a: usize) -> ArrayView1<'_, f64> {
        self.transitions.slice(ndarray::s![h, s, a, ..])
    }

    pub fn theta_r(&self) -> &Array2<f64> {
        &self.theta_r
    }

    pub fn theta_u(&self) -> &Array2<f64> {
        &self.theta_u
    }

    /// `(H, S, A)` reward table.
    pub fn reward(&self) -> ArrayView3<'_, f64> {
        self.reward.view()
    }

    /// `(H, S, A)` utility table.
    pub fn utility(&self) -> ArrayView3<'_, f64> {
        self.utility.view()
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && (0.0..=self.horizon as f64).contains(&threshold)) {
            return Err(Error::invalid(format!("threshold {threshold} outside [0, H]")));
        }
        Ok(Self {
            threshold,
            ..self.clone()
        })
    }

    /// True when the features are the one-hot encoding of `(s, a)` with
    /// `d = S * A`, i.e. the environment is tabular.
    pub fn is_tabular(&self) -> bool {
        if self.dim != self.num_states * self.num_actions {
            return false;
        }
        ndarray::indices((self.num_states, self.num_actions))
            .into_iter()
            .all(|(s, a)| {
                let hot = s * self.num_actions + a;
                self.feature(s, a)
                    .iter()
                    .enumerate()
                    .all(|(i, &v)| if i == hot { v == 1.0 } else { v == 0.0 })
            })
    }

    pub(crate) fn check_policy(&self, policy: &ExplicitPolicy) -> Result<()> {
        if policy.probs.dim() != (self.horizon, self.num_states, self.num_actions) {
            return Err(Error::invalid(format!(
                "policy shape {:?} does not match CMDP shape ({}, {}, {})",
                policy.probs.dim(),
                self.horizon,
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    pub(crate) fn check_table(&self, g: &ArrayView3<'_, f64>) -> Result<()> {
        if g.dim() != (self.horizon, self.num_states, self.num_actions) {
            return Err(Error::invalid(format!(
                "per-step table shape {:?} does not match CMDP shape",
                g.dim()
            )));
        }
        Ok(())
    }
}

fn linear_table(features: &Array3<f64>, theta: &Array2<f64>) -> Array3<f64> {
    let (ns, na, _) = features.dim();
    let horizon = theta.nrows();
    Array3::from_shape_fn((horizon, ns, na), |(h, s, a)| {
        features.slice(ndarray::s![s, a, ..]).dot(&theta.row(h))
    })
}

/// Per-step, per-state action distributions `pi_h(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitPolicy {
    probs: Array3<f64>,
}

impl ExplicitPolicy {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        for row in probs.lanes(Axis(2)) {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid("policy has a negative or NaN probability"));
            }
            let total: f64 = row.sum();
            if (total - 1.0).abs() > POLICY_TOL {
                return Err(Error::invalid(format!("policy row sums to {total}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: Array3::from_elem((horizon, num_states, num_actions), 1.0 / num_actions as f64),
        }
    }

    /// Deterministic policy from an `(H, S)` table of action indices.
    pub fn deterministic(actions: &Array2<usize>, num_actions: usize) -> Self {
        let (horizon, ns) = actions.dim();
        Self {
            probs: Array3::from_shape_fn((horizon, ns, num_actions), |(h, s, a)| {
                if actions[[h, s]] == a {
                    1.0
                } else {
                    0.0
                }
            }),
        }
    }

    /// Builds a policy from rows that are normalized by construction
    /// (softmax or LP extraction); skips the validation pass.
    pub(crate) fn from_rows_unchecked(probs: Array3<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    pub fn dist(&self, h: usize, s: usize) -> ArrayView1<'_, f64> {
        self.probs.slice(ndarray::s![h, s, ..])
    }

    pub fn horizon(&self) -> usize {
        self.probs.dim().0
    }
}

/// The known strictly safe policy together with its Slater slack.
#[derive(Debug, Clone, PartialEq)]
pub struct SafePolicyOracle {
    pub policy: ExplicitPolicy,
    pub slack: f64,
}

/// Value tables `V_h(s)` for `h = 0..=H`, where row `H` is identically zero.
#[derive(Debug, Clone)]
pub struct PolicyValues {
    pub values: Array2<f64>,
}

impl PolicyValues {
    pub fn at(&self, h: usize, s: usize) -> f64 {
        self.values[[h, s]]
    }
}

/// Exact evaluation of `policy` on `g` with entropy coefficient `kappa`,
/// using the convention `0 ln 0 = 0`.
pub fn evaluate_policy(
    cmdp: &LinearCmdp,
    policy: &ExplicitPolicy,
    g: ArrayView3<'_, f64>,
    kappa: f64,
) -> Result<PolicyValues> {
    cmdp.check_policy(policy)?;
    cmdp.check_table(&g)?;
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("kappa must be nonnegative, got {kappa}")));
    }
    let (horizon, ns, na) = (cmdp.horizon, cmdp.num_states, cmdp.num_actions);
    let mut values = Array2::<f64>::zeros((horizon + 1, ns));
    for h in (0..horizon).rev() {
        let next = values.row(h + 1).to_owned();
        for s in 0..ns {
            let mut v = 0.0;
            for a in 0..na {
                let p = policy.probs[[h, s, a]];
                if p == 0.0 {
                    continue;
                }
                let q = g[[h, s, a]] + cmdp.next_state_distribution(h, s, a).dot(&next);
                v += p * (q - kappa * p.ln());
            }
            values[[h, s]] = v;
        }
    }
    Ok(PolicyValues { values })
}

/// Convenience: `V_1(s1)` of `policy` on `g` without entropy.
pub fn initial_value(cmdp: &LinearCmdp, policy: &ExplicitPolicy, g: ArrayView3<'_, f64>) -> Result<f64> {
    Ok(evaluate_policy(cmdp, policy, g, 0.0)?.at(0, cmdp.initial_state))
}

/// State-action visitation probabilities per step.
#[derive(Debug, Clone)]
pub struct OccupancyMeasure {
    pub w: Array3<f64>,
}

impl OccupancyMeasure {
    /// `sum_{h,s,a} w_h(s,a) g_h(s,a)`.
    pub fn integrate(&self, g: ArrayView3<'_, f64>) -> f64 {
        self.w.iter().zip(g.iter()).map(|(w, g)| w * g).sum()
    }

    /// Largest absolute violation of the Bellman flow equations and of the
    /// initial-state anchoring.
    pub fn flow_residual(&self, cmdp: &LinearCmdp) -> f64 {
        let (horizon, ns, na) = self.w.dim();
        let mut worst = 0.0_f64;
        for s in 0..ns {
            let mass: f64 = self.w.slice(ndarray::s![0, s, ..]).sum();
            let target = if s == cmdp.initial_state { 1.0 } else { 0.0 };
            worst = worst.max((mass - target).abs());
        }
        for h in 0..horizon.saturating_sub(1) {
            let mut inflow = Array1::<f64>::zeros(ns);
            for s in 0..ns {
                for a in 0..na {
                    inflow.scaled_add(self.w[[h, s, a]], &cmdp.next_state_distribution(h, s, a));
                }
            }
            for s in 0..ns {
                let outflow: f64 = self.w.slice(ndarray::s![h + 1, s, ..]).sum();
                worst = worst.max((outflow - inflow[s]).abs());
            }
        }
        worst
    }
}

pub fn occupancy(cmdp: &LinearCmdp, policy: &ExplicitPolicy) -> Result<OccupancyMeasure> {
    cmdp.check_policy(policy)?;
    let (horizon, ns, na) = (cmdp.horizon, cmdp.num_states, cmdp.num_actions);
    let mut w = Array3::<f64>::zeros((horizon, ns, na));
    let mut state_mass = Array1::<f64>::zeros(ns);
    state_mass[cmdp.initial_state] = 1.0;
    for h in 0..horizon {
        let mut next_mass = Array1::<f64>::zeros(ns);
        for s in 0..ns {
            if state_mass[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let m = state_mass[s] * policy.probs[[h, s, a]];
                w[[h, s, a]] = m;
                if m != 0.0 {
                    next_mass.scaled_add(m, &cmdp.next_state_distribution(h, s, a));
                }
            }
        }
        state_mass = next_mass;
    }
    Ok(OccupancyMeasure { w })
}

/// Unconstrained backward induction on `g`; ties go to the lowest action
/// index. Returns the greedy policy and `V*_1(s1)`.
pub fn dp_optimal(cmdp: &LinearCmdp, g: ArrayView3<'_, f64>) -> Result<(ExplicitPolicy, f64)> {
    cmdp.check_table(&g)?;
    let (horizon, ns, na) = (cmdp.horizon, cmdp.num_states, cmdp.num_actions);
    let mut values = Array1::<f64>::zeros(ns);
    let mut greedy = Array2::<usize>::zeros((horizon, ns));
    for h in (0..horizon).rev() {
        let mut current = Array1::<f64>::zeros(ns);
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..na {
                let q = g[[h, s, a]] + cmdp.next_state_distribution(h, s, a).dot(&values);
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            current[s] = best;
            greedy[[h, s]] = best_a;
        }
        values = current;
    }
    Ok((ExplicitPolicy::deterministic(&greedy, na), values[cmdp.initial_state]))
}

/// `softmax(x / kappa)` with max-subtraction.
pub fn softmax_distribution(x: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::invalid(format!("kappa must be positive, got {kappa}")));
    }
    if x.is_empty() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input must be nonempty and finite"));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, kappa, &mut out);
    Ok(out)
}

/// Writes `log softmax(x / kappa)` into `out` and returns nothing; inputs are
/// assumed finite.
pub(crate) fn log_softmax_into(x: &[f64], kappa: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max) / kappa;
        total += o.exp();
    }
    let log_total = total.ln();
    for o in out.iter_mut() {
        *o -= log_total;
    }
}

pub(crate) fn softmax_into(x: &[f64], kappa: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / kappa).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Inverse-CDF draw from a discrete distribution; stable across platforms
/// because it consumes exactly one `f64` per call.
pub fn sample_index<R: Rng + ?Sized>(probs: ArrayView1<'_, f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// One observed step `(s_h, a_h, s_{h+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

/// Rolls out `policy` for `H` steps from `s1` on the true kernel.
pub fn sample_trajectory<R: Rng + ?Sized>(
    cmdp: &LinearCmdp,
    policy: &ExplicitPolicy,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    cmdp.check_policy(policy)?;
    let mut state = cmdp.initial_state;
    let mut out = Vec::with_capacity(cmdp.horizon);
    for h in 0..cmdp.horizon {
        let action = sample_index(policy.dist(h, state), rng);
        let next_state = sample_index(cmdp.next_state_distribution(h, state, action), rng);
        out.push(Transition {
            state,
            action,
            next_state,
        });
        state = next_state;
    }
    Ok(out)
}

/// On-disk environment document. Arrays are flattened row-major:
/// `features[(s*A + a)*d + i]`, `transitions[((h*S + s)*A + a)*S + s']`,
/// `theta_*[h*d + i]`, `safe_policy[(h*S + s)*A + a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentDocument {
    #[serde(rename = "H")]
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub d: usize,
    pub features: Vec<f64>,
    pub transitions: Vec<f64>,
    pub theta_r: Vec<f64>,
    pub theta_u: Vec<f64>,
    pub b: f64,
    pub s1: usize,
    pub safe_policy: Vec<f64>,
    pub slack: f64,
}

impl EnvironmentDocument {
    pub fn from_env(cmdp: &LinearCmdp, safe: &SafePolicyOracle) -> Self {
        Self {
            horizon: cmdp.horizon,
            num_states: cmdp.num_states,
            num_actions: cmdp.num_actions,
            d: cmdp.dim,
            features: cmdp.features.iter().copied().collect(),
            transitions: cmdp.transitions.iter().copied().collect(),
            theta_r: cmdp.theta_r.iter().copied().collect(),
            theta_u: cmdp.theta_u.iter().copied().collect(),
            b: cmdp.threshold,
            s1: cmdp.initial_state,
            safe_policy: safe.policy.probs.iter().copied().collect(),
            slack: safe.slack,
        }
    }

    pub fn into_env(self) -> Result<(LinearCmdp, SafePolicyOracle)> {
        let (h, ns, na, d) = (self.horizon, self.num_states, self.num_actions, self.d);
        let shape_err = |what: &str| Error::invalid(format!("{what} has the wrong length"));
        let features = Array3::from_shape_vec((ns, na, d), self.features).map_err(|_| shape_err("features"))?;
        let transitions =
            Array4::from_shape_vec((h, ns, na, ns), self.transitions).map_err(|_| shape_err("transitions"))?;
        let theta_r = Array2::from_shape_vec((h, d), self.theta_r).map_err(|_| shape_err("theta_r"))?;
        let theta_u = Array2::from_shape_vec((h, d), self.theta_u).map_err(|_| shape_err("theta_u"))?;
        let probs = Array3::from_shape_vec((h, ns, na), self.safe_policy).map_err(|_| shape_err("safe_policy"))?;
        let cmdp = LinearCmdp::new(features, transitions, theta_r, theta_u, self.b, self.s1)?;
        let policy = ExplicitPolicy::new(probs)?;
        if !(self.slack > 0.0) {
            return Err(Error::invalid("slack must be positive"));
        }
        Ok((cmdp, SafePolicyOracle { policy, slack: self.slack }))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
