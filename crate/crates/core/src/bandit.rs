//! Finite-action linear constrained bandits and OPLB-SP.
//!
//! Each round the agent plays a distribution over actions. While the known
//! safe distribution is still unconfident (`C_p beta(pi_safe) > xi / 2`) it
//! plays that distribution; otherwise it solves the optimistic-pessimistic
//! program over the simplex with reward `r_hat + C_o beta` and utility
//! `u_hat - C_p beta`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cmdp::sample_index;
use crate::error::{Error, Result};
use crate::harness::metrics::{Accumulator, EpisodeNotes, MetricsHeader, MetricsLog};
use crate::harness::seeding;
use crate::linalg::Gram;

const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    /// `(num_actions, d)`, rows of norm at most 1.
    actions: Array2<f64>,
    theta_r: Array1<f64>,
    theta_u: Array1<f64>,
    /// Standard deviation of the Gaussian observation noise.
    noise_scale: f64,
    /// Bound `B` on the theta norms.
    bound: f64,
    threshold: f64,
    safe_dist: Vec<f64>,
    slack: f64,
}

impl BanditInstance {
    /// The slack is computed as `u(safe_dist) - b` and must be positive.
    pub fn new(
        actions: Array2<f64>,
        theta_r: Array1<f64>,
        theta_u: Array1<f64>,
        noise_scale: f64,
        bound: f64,
        threshold: f64,
        safe_dist: Vec<f64>,
    ) -> Result<Self> {
        let (n, d) = actions.dim();
        if n == 0 || d == 0 || theta_r.len() != d || theta_u.len() != d || safe_dist.len() != n {
            return Err(Error::invalid("inconsistent bandit dimensions"));
        }
        if actions.rows().into_iter().any(|a| a.dot(&a).sqrt() > 1.0 + NORM_TOL) {
            return Err(Error::invalid("action norm exceeds 1"));
        }
        if theta_r.dot(&theta_r).sqrt() > bound + NORM_TOL || theta_u.dot(&theta_u).sqrt() > bound + NORM_TOL {
            return Err(Error::invalid("theta norm exceeds B"));
        }
        if !(noise_scale >= 0.0 && threshold.is_finite()) {
            return Err(Error::invalid("noise scale must be nonnegative and the threshold finite"));
        }
        if safe_dist.iter().any(|&p| !(p >= 0.0)) || (safe_dist.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("safe distribution is not a probability vector"));
        }
        let mut instance = Self {
            actions,
            theta_r,
            theta_u,
            noise_scale,
            bound,
            threshold,
            safe_dist,
            slack: 0.0,
        };
        let safe_utility = instance.expected_utility(&instance.safe_dist);
        instance.slack = safe_utility - threshold;
        if !(instance.slack > 0.0) {
            return Err(Error::NoSlack {
                threshold,
                max_utility: instance.utilities().into_iter().fold(f64::NEG_INFINITY, f64::max),
            });
        }
        Ok(instance)
    }

    /// `d = 4`, 20 actions uniform on the unit sphere, thetas uniform in the
    /// unit ball, `R = 0.1`, `b = 0.5 max_a theta_u . a` and the safe policy
    /// a point mass on the utility-maximizing action.
    pub fn default_synthetic(seed: u64) -> Result<Self> {
        let (n, d) = (20, 4);
        for attempt in 0.. {
            let label = if attempt == 0 {
                seeding::ENV_STREAM.to_string()
            } else {
                format!("{}/retry{attempt}", seeding::ENV_STREAM)
            };
            let mut rng = seeding::stream(seed, &label);
            let mut actions = Array2::<f64>::zeros((n, d));
            for mut row in actions.rows_mut() {
                row.assign(&unit_sphere(d, &mut rng));
            }
            let theta_r = unit_ball(d, &mut rng);
            let theta_u = unit_ball(d, &mut rng);
            let utilities = actions.dot(&theta_u);
            let best = argmax(utilities.as_slice().expect("contiguous"));
            if utilities[best] <= 0.0 {
                continue;
            }
            let mut safe_dist = vec![0.0; n];
            safe_dist[best] = 1.0;
            return Self::new(actions, theta_r, theta_u, 0.1, 1.0, 0.5 * utilities[best], safe_dist);
        }
        unreachable!("the retry loop only exits by returning")
    }

    pub fn num_actions(&self) -> usize {
        self.actions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn action(&self, i: usize) -> ArrayView1<'_, f64> {
        self.actions.row(i)
    }

    pub fn actions(&self) -> &Array2<f64> {
        &self.actions
    }

    pub fn theta_r(&self) -> &Array1<f64> {
        &self.theta_r
    }

    pub fn theta_u(&self) -> &Array1<f64> {
        &self.theta_u
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn safe_dist(&self) -> &[f64] {
        &self.safe_dist
    }

    pub fn slack(&self) -> f64 {
        self.slack
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.actions.dot(&self.theta_r).to_vec()
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.actions.dot(&self.theta_u).to_vec()
    }

    pub fn expected_reward(&self, dist: &[f64]) -> f64 {
        dist.iter().zip(self.rewards()).map(|(p, r)| p * r).sum()
    }

    pub fn expected_utility(&self, dist: &[f64]) -> f64 {
        dist.iter().zip(self.utilities()).map(|(p, u)| p * u).sum()
    }

    /// Value of the best distribution whose exact utility clears `b`.
    pub fn optimal_value(&self) -> Result<f64> {
        let (_, value) = solve_opt_pes(&self.rewards(), &self.utilities(), self.threshold)?;
        Ok(value)
    }
}

fn unit_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn unit_ball<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    let direction = unit_sphere(d, rng);
    let radius = rng.random::<f64>().powf(1.0 / d as f64);
    direction * radius
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Maximizes `sum pi(a) obj(a)` subject to `sum pi(a) con(a) >= b` over the
/// simplex. An optimal vertex has at most two actions in its support, so
/// every feasible single action and every boundary mixture of a feasible and
/// an infeasible action is tried. Ties go to the lexicographically smallest
/// support. Returns the distribution and its objective.
pub fn solve_opt_pes(obj: &[f64], con: &[f64], b: f64) -> Result<(Vec<f64>, f64)> {
    let n = obj.len();
    if n == 0 || con.len() != n {
        return Err(Error::invalid("objective and constraint must have the same nonzero length"));
    }
    if con.iter().all(|&c| c < b) {
        return Err(Error::Infeasible);
    }
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    let mut offer = |support: Vec<usize>, weights: Vec<f64>, value: f64| {
        let better = match &best {
            None => true,
            Some((s, _, v)) => value > *v || (value == *v && support < *s),
        };
        if better {
            best = Some((support, weights, value));
        }
    };
    for i in 0..n {
        if con[i] >= b {
            offer(vec![i], vec![1.0], obj[i]);
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let (hi, lo) = if con[i] >= b && b > con[j] {
                (i, j)
            } else if con[j] >= b && b > con[i] {
                (j, i)
            } else {
                continue;
            };
            let alpha = (b - con[lo]) / (con[hi] - con[lo]);
            let value = alpha * obj[hi] + (1.0 - alpha) * obj[lo];
            let weights = if hi == i { vec![alpha, 1.0 - alpha] } else { vec![1.0 - alpha, alpha] };
            offer(vec![i, j], weights, value);
        }
    }
    let (support, weights, value) = best.expect("some action is feasible");
    let mut dist = vec![0.0; n];
    for (i, w) in support.into_iter().zip(weights) {
        dist[i] = w;
    }
    Ok((dist, value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    pub rho: f64,
    pub delta: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            delta: 0.05,
            episodes: 10_000,
            seed: 0,
        }
    }
}

/// Ridge-regression state of OPLB-SP.
#[derive(Debug, Clone)]
pub struct BanditAgentState {
    gram: Gram,
    sum_r: Array1<f64>,
    sum_u: Array1<f64>,
    round: usize,
    c_p: f64,
    c_o: f64,
}

impl BanditAgentState {
    /// `C_p = B + R sqrt(d ln(4K / delta))`, `C_o = C_p (1 + 2B / xi)`.
    pub fn new(instance: &BanditInstance, cfg: &BanditConfig) -> Result<Self> {
        if !(cfg.rho > 0.0 && cfg.delta > 0.0 && cfg.delta < 1.0 && cfg.episodes > 0) {
            return Err(Error::invalid("need rho > 0, 0 < delta < 1 and at least one round"));
        }
        let d = instance.dim();
        let c_p = instance.bound
            + instance.noise_scale * (d as f64 * (4.0 * cfg.episodes as f64 / cfg.delta).ln()).sqrt();
        let c_o = c_p * (1.0 + 2.0 * instance.bound / instance.slack);
        Ok(Self {
            gram: Gram::new(d, cfg.rho),
            sum_r: Array1::zeros(d),
            sum_u: Array1::zeros(d),
            round: 0,
            c_p,
            c_o,
        })
    }

    pub fn c_p(&self) -> f64 {
        self.c_p
    }

    pub fn c_o(&self) -> f64 {
        self.c_o
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn gram(&self) -> &Gram {
        &self.gram
    }

    pub fn theta_r_hat(&self) -> Array1<f64> {
        self.gram.solve(self.sum_r.view())
    }

    pub fn theta_u_hat(&self) -> Array1<f64> {
        self.gram.solve(self.sum_u.view())
    }

    /// `||a||_{Lambda^-1}` for every action.
    pub fn bonuses(&self, instance: &BanditInstance) -> Vec<f64> {
        instance.actions.rows().into_iter().map(|a| self.gram.inverse_norm(a)).collect()
    }

    /// `E_{a ~ pi} ||a||_{Lambda^-1}`.
    pub fn policy_bonus(&self, instance: &BanditInstance, dist: &[f64]) -> f64 {
        dist.iter().zip(self.bonuses(instance)).map(|(p, b)| p * b).sum()
    }

    pub fn update(&mut self, action: ArrayView1<'_, f64>, reward: f64, utility: f64) {
        self.gram.add_outer(action);
        self.sum_r.scaled_add(reward, &action);
        self.sum_u.scaled_add(utility, &action);
        self.round += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundKind {
    /// The safe distribution was unconfident and got played.
    Unconfident,
    /// The optimistic-pessimistic program was infeasible; the safe
    /// distribution was played instead.
    Infeasible,
    OptPes,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub dist: Vec<f64>,
    pub kind: RoundKind,
    pub action: usize,
    pub reward: f64,
    pub utility: f64,
}

/// Picks the round's distribution from the current state.
pub fn choose_distribution(state: &BanditAgentState, instance: &BanditInstance) -> Result<(Vec<f64>, RoundKind)> {
    let bonuses = state.bonuses(instance);
    let safe_bonus: f64 = instance.safe_dist.iter().zip(&bonuses).map(|(p, b)| p * b).sum();
    if state.c_p * safe_bonus > instance.slack / 2.0 {
        return Ok((instance.safe_dist.clone(), RoundKind::Unconfident));
    }
    let r_hat = instance.actions.dot(&state.theta_r_hat());
    let u_hat = instance.actions.dot(&state.theta_u_hat());
    let obj: Vec<f64> = r_hat.iter().zip(&bonuses).map(|(r, b)| r + state.c_o * b).collect();
    let con: Vec<f64> = u_hat.iter().zip(&bonuses).map(|(u, b)| u - state.c_p * b).collect();
    match solve_opt_pes(&obj, &con, instance.threshold) {
        Ok((dist, _)) => Ok((dist, RoundKind::OptPes)),
        Err(Error::Infeasible) => {
            log::debug!("round {}: opt-pes infeasible at a confident round", state.round + 1);
            Ok((instance.safe_dist.clone(), RoundKind::Infeasible))
        }
        Err(e) => Err(e),
    }
}

/// One round: choose, sample an action with `sampler`, observe noisy reward
/// and utility drawn with `noise`, update the state.
pub fn oplbsp_round<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    state: &mut BanditAgentState,
    instance: &BanditInstance,
    sampler: &mut R1,
    noise: &mut R2,
) -> Result<RoundOutcome> {
    let (dist, kind) = choose_distribution(state, instance)?;
    let action = sample_index(ArrayView1::from(&dist[..]), sampler);
    let a = instance.actions.row(action);
    let gaussian = Normal::new(0.0, instance.noise_scale).map_err(|e| Error::invalid(e.to_string()))?;
    let reward = instance.theta_r.dot(&a) + gaussian.sample(noise);
    let utility = instance.theta_u.dot(&a) + gaussian.sample(noise);
    state.update(a, reward, utility);
    Ok(RoundOutcome {
        dist,
        kind,
        action,
        reward,
        utility,
    })
}

#[derive(Debug, Clone)]
pub struct BanditRun {
    pub log: MetricsLog,
    pub kinds: Vec<RoundKind>,
}

impl BanditRun {
    pub fn unconfident_rounds(&self) -> impl Iterator<Item = usize> + '_ {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == RoundKind::Unconfident)
            .map(|(i, _)| i + 1)
    }
}

/// Plays `cfg.episodes` rounds and records exact expected values per round.
/// Safe deployments count both unconfident and infeasible rounds.
pub fn run_bandit(instance: &BanditInstance, cfg: &BanditConfig) -> Result<BanditRun> {
    let mut state = BanditAgentState::new(instance, cfg)?;
    let mut sampler = seeding::stream(cfg.seed, seeding::SAMPLER_STREAM);
    let mut noise = seeding::stream(cfg.seed, seeding::NOISE_STREAM);
    let optimal_value = instance.optimal_value()?;
    let mut acc = Accumulator::default();
    let mut records = Vec::with_capacity(cfg.episodes);
    let mut notes = Vec::with_capacity(cfg.episodes);
    let mut kinds = Vec::with_capacity(cfg.episodes);
    for k in 1..=cfg.episodes {
        let outcome = oplbsp_round(&mut state, instance, &mut sampler, &mut noise)?;
        let safe = outcome.kind != RoundKind::OptPes;
        records.push(acc.push(
            k,
            optimal_value,
            instance.threshold,
            instance.expected_reward(&outcome.dist),
            instance.expected_utility(&outcome.dist),
            1,
            safe as usize,
            0.0,
            0.0,
        ));
        notes.push(EpisodeNotes {
            safe,
            estimated_utility: None,
        });
        kinds.push(outcome.kind);
    }
    Ok(BanditRun {
        log: MetricsLog {
            header: MetricsHeader {
                algo: "oplbsp".into(),
                env: "bandit".into(),
                seed: cfg.seed,
                episodes: cfg.episodes,
                eval_stride: 1,
                optimal_value,
                threshold: instance.threshold,
                slack: instance.slack,
                config: serde_json::to_value(cfg)?,
            },
            records,
            notes,
        },
        kinds,
    })
}
