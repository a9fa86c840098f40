//! Seeded generators for the synthetic tabular, media-streaming and
//! synthetic linear environments, plus the safe-policy oracle.
//!
//! All randomness comes from the `env` sub-stream of the master seed, so an
//! environment is a pure function of its seed.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::cmdp::{dp_optimal, initial_value, LinearCmdp, SafePolicyOracle};
use crate::error::{Error, Result};
use crate::harness::seeding;

pub const TABULAR_STATES: usize = 5;
pub const TABULAR_ACTIONS: usize = 3;
pub const TABULAR_HORIZON: usize = 4;
pub const TABULAR_THRESHOLD_FACTOR: f64 = 0.6;

pub const STREAMING_BUFFER: usize = 5;
pub const STREAMING_HORIZON: usize = 4;
pub const STREAMING_THRESHOLD_FACTOR: f64 = 0.6;
/// Action index of the slow service.
pub const SLOW: usize = 0;
/// Action index of the fast service.
pub const FAST: usize = 1;

pub const LINEAR_STATES: usize = 100;
pub const LINEAR_ACTIONS: usize = 3;
pub const LINEAR_DIM: usize = 5;
pub const LINEAR_HORIZON: usize = 4;
pub const LINEAR_THRESHOLD_FACTOR: f64 = 0.68;

const DIRICHLET_ALPHA: f64 = 0.1;
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Tabular,
    Streaming,
    Linear,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Tabular => "tabular",
            EnvKind::Streaming => "streaming",
            EnvKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(EnvKind::Tabular),
            "streaming" => Ok(EnvKind::Streaming),
            "linear" => Ok(EnvKind::Linear),
            other => Err(Error::UnsupportedEnvironment(other.to_string())),
        }
    }
}

/// Generates the environment of `kind`; `num_states` and `dim` only apply
/// to the linear family.
pub fn generate(kind: EnvKind, seed: u64, num_states: usize, dim: usize) -> Result<(LinearCmdp, SafePolicyOracle)> {
    match kind {
        EnvKind::Tabular => gen_tabular(seed),
        EnvKind::Streaming => gen_streaming(seed),
        EnvKind::Linear => gen_linear(seed, num_states, dim),
    }
}

/// Samples `Dirichlet(alpha, ..., alpha)` of length `n`.
///
/// Gamma-ratio method. For `alpha < 1` the Gamma draws are taken in log
/// space as `ln G(alpha + 1) + ln(U) / alpha`, which avoids the underflow to
/// an all-zero vector that small concentrations otherwise produce.
pub fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    assert!(alpha > 0.0 && n > 0, "dirichlet needs alpha > 0 and n > 0");
    let boosted = if alpha < 1.0 { alpha + 1.0 } else { alpha };
    let gamma = Gamma::new(boosted, 1.0).expect("shape is positive");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            if alpha < 1.0 {
                let u = 1.0 - rng.random::<f64>();
                g.ln() + u.ln() / alpha
            } else {
                g.ln()
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn one_hot_features(ns: usize, na: usize) -> Array3<f64> {
    Array3::from_shape_fn((ns, na, ns * na), |(s, a, i)| if i == s * na + a { 1.0 } else { 0.0 })
}

fn one_hot_theta(table: &Array3<f64>) -> Array2<f64> {
    let (horizon, ns, na) = table.dim();
    Array2::from_shape_fn((horizon, ns * na), |(h, i)| table[[h, i / na, i % na]])
}

/// Sets `b = factor * max_pi V^{pi,u}_1(s1)` and derives the safe policy.
fn with_relative_threshold(cmdp: LinearCmdp, factor: f64) -> Result<(LinearCmdp, SafePolicyOracle)> {
    let (_, max_utility) = dp_optimal(&cmdp, cmdp.utility())?;
    let cmdp = cmdp.with_threshold(factor * max_utility)?;
    let safe = derive_safe_policy(&cmdp)?;
    Ok((cmdp, safe))
}

/// Synthetic tabular CMDP: Dirichlet(0.1) transitions, Bernoulli rewards and
/// utilities, one-hot features.
pub fn gen_tabular(seed: u64) -> Result<(LinearCmdp, SafePolicyOracle)> {
    let (ns, na, horizon) = (TABULAR_STATES, TABULAR_ACTIONS, TABULAR_HORIZON);
    let mut rng = seeding::stream(seed, seeding::ENV_STREAM);
    let mut transitions = Array4::<f64>::zeros((horizon, ns, na, ns));
    for (h, s, a) in ndarray::indices((horizon, ns, na)) {
        for (n, p) in dirichlet(DIRICHLET_ALPHA, ns, &mut rng).into_iter().enumerate() {
            transitions[[h, s, a, n]] = p;
        }
    }
    let mut coin = |_| if rng.random::<f64>() < 0.1 { 0.0 } else { 1.0 };
    let reward = Array3::from_shape_fn((horizon, ns, na), &mut coin);
    let utility = Array3::from_shape_fn((horizon, ns, na), &mut coin);
    let initial_state = rng.random_range(0..ns);
    let cmdp = LinearCmdp::new(
        one_hot_features(ns, na),
        transitions,
        one_hot_theta(&reward),
        one_hot_theta(&utility),
        0.0,
        initial_state,
    )?;
    with_relative_threshold(cmdp, TABULAR_THRESHOLD_FACTOR)
}

/// Buffer transition kernel for arrival probability `arrive` and playout
/// probability `play`: `s' = min(max(0, s + A - B), L)`.
pub fn streaming_kernel(buffer: usize, arrive: f64, play: f64) -> Array2<f64> {
    let ns = buffer + 1;
    let mut kernel = Array2::<f64>::zeros((ns, ns));
    for s in 0..ns {
        for (arrival, p_a) in [(0, 1.0 - arrive), (1, arrive)] {
            for (departure, p_b) in [(0, 1.0 - play), (1, play)] {
                let next = (s + arrival).saturating_sub(departure).min(buffer);
                kernel[[s, next]] += p_a * p_b;
            }
        }
    }
    kernel
}

/// Media streaming CMDP: the state is the buffer length, the fast service
/// delivers a packet with probability `mu ~ U[0.5, 0.9]` and the slow one with
/// `1 - mu`, playout departs with probability `rho ~ U[0.1, 0.4]`.
pub fn gen_streaming(seed: u64) -> Result<(LinearCmdp, SafePolicyOracle)> {
    let buffer = STREAMING_BUFFER;
    let (ns, na, horizon) = (buffer + 1, 2, STREAMING_HORIZON);
    let mut rng = seeding::stream(seed, seeding::ENV_STREAM);
    let mu_fast = rng.random_range(0.5..0.9);
    let play = rng.random_range(0.1..0.4);
    let kernels = [
        streaming_kernel(buffer, 1.0 - mu_fast, play),
        streaming_kernel(buffer, mu_fast, play),
    ];
    let transitions = Array4::from_shape_fn((horizon, ns, na, ns), |(_, s, a, n)| kernels[a][[s, n]]);
    let reward_level = (0.3 * buffer as f64).ceil() as usize;
    let reward = Array3::from_shape_fn((horizon, ns, na), |(_, s, _)| (s >= reward_level) as u8 as f64);
    let utility = Array3::from_shape_fn((horizon, ns, na), |(_, _, a)| (a == SLOW) as u8 as f64);
    let cmdp = LinearCmdp::new(
        one_hot_features(ns, na),
        transitions,
        one_hot_theta(&reward),
        one_hot_theta(&utility),
        0.0,
        0,
    )?;
    with_relative_threshold(cmdp, STREAMING_THRESHOLD_FACTOR)
}

/// Synthetic linear CMDP with `P_h(s'|s,a) = mu_h(s') . phi(s,a)`, where the
/// features and every column of `mu_h` are Dirichlet(0.1) draws and the
/// thetas are uniform on `[0, 1]^d`.
///
/// A draw that fails validation is discarded and generation restarts from a
/// fresh sub-stream of the same seed.
pub fn gen_linear(seed: u64, num_states: usize, dim: usize) -> Result<(LinearCmdp, SafePolicyOracle)> {
    if num_states <= dim || dim == 0 {
        return Err(Error::invalid(format!(
            "linear environment needs num_states > d > 0, got {num_states} and {dim}"
        )));
    }
    let mut last_error = None;
    for attempt in 0..MAX_ATTEMPTS {
        let label = if attempt == 0 {
            seeding::ENV_STREAM.to_string()
        } else {
            format!("{}/retry{attempt}", seeding::ENV_STREAM)
        };
        let mut rng = seeding::stream(seed, &label);
        match linear_draw(&mut rng, num_states, dim) {
            Ok(env) => return Ok(env),
            Err(e) => {
                log::warn!("linear environment draw {attempt} for seed {seed} rejected: {e}");
                last_error = Some(e);
            }
        }
    }
    Err(last_error.expect("at least one attempt"))
}

fn linear_draw<R: Rng + ?Sized>(rng: &mut R, ns: usize, dim: usize) -> Result<(LinearCmdp, SafePolicyOracle)> {
    let (na, horizon) = (LINEAR_ACTIONS, LINEAR_HORIZON);
    let mut features = Array3::<f64>::zeros((ns, na, dim));
    for (s, a) in ndarray::indices((ns, na)) {
        for (i, v) in dirichlet(DIRICHLET_ALPHA, dim, rng).into_iter().enumerate() {
            features[[s, a, i]] = v;
        }
    }
    // mu[h, i, s'] is the i-th next-state measure at step h.
    let mut mu = Array3::<f64>::zeros((horizon, dim, ns));
    for (h, i) in ndarray::indices((horizon, dim)) {
        for (n, p) in dirichlet(DIRICHLET_ALPHA, ns, rng).into_iter().enumerate() {
            mu[[h, i, n]] = p;
        }
    }
    let theta_r = Array2::from_shape_fn((horizon, dim), |_| rng.random::<f64>());
    let theta_u = Array2::from_shape_fn((horizon, dim), |_| rng.random::<f64>());
    let initial_state = rng.random_range(0..ns);
    let transitions = Array4::from_shape_fn((horizon, ns, na, ns), |(h, s, a, n)| {
        (0..dim).map(|i| features[[s, a, i]] * mu[[h, i, n]]).sum()
    });
    let cmdp = LinearCmdp::new(features, transitions, theta_r, theta_u, 0.0, initial_state)?;
    with_relative_threshold(cmdp, LINEAR_THRESHOLD_FACTOR)
}

/// Utility-greedy policy and its slack `V^{pi_safe,u}_1(s1) - b`.
pub fn derive_safe_policy(cmdp: &LinearCmdp) -> Result<SafePolicyOracle> {
    let (policy, max_utility) = dp_optimal(cmdp, cmdp.utility())?;
    let value = initial_value(cmdp, &policy, cmdp.utility())?;
    if !(value > cmdp.threshold()) {
        return Err(Error::NoSlack {
            threshold: cmdp.threshold(),
            max_utility,
        });
    }
    Ok(SafePolicyOracle {
        policy,
        slack: value - cmdp.threshold(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn dirichlet_is_a_distribution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 100] {
            for alpha in [0.01, 0.1, 1.0, 3.0] {
                let p = dirichlet(alpha, n, &mut rng);
                assert_eq!(p.len(), n);
                assert!(p.iter().all(|&x| x >= 0.0));
                assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_mean_matches() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let draws = 20_000;
        let mut mean = [0.0; 4];
        for _ in 0..draws {
            for (m, p) in mean.iter_mut().zip(dirichlet(0.1, 4, &mut rng)) {
                *m += p / draws as f64;
            }
        }
        for m in mean {
            assert!((m - 0.25).abs() < 0.02, "{m}");
        }
    }

    #[test]
    fn buffer_clamps() {
        let k = streaming_kernel(5, 1.0, 1.0);
        assert_eq!(k[[0, 0]], 1.0);
        let k = streaming_kernel(5, 1.0, 0.0);
        assert_eq!(k[[5, 5]], 1.0);
        assert_eq!(k[[2, 3]], 1.0);
    }

    #[test]
    fn streaming_threshold_and_slack() {
        let (cmdp, safe) = gen_streaming(1).unwrap();
        assert_eq!((cmdp.num_states(), cmdp.num_actions(), cmdp.dim()), (6, 2, 12));
        assert_abs_diff_eq!(cmdp.threshold(), 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(safe.slack, 1.6, epsilon = 1e-12);
        for h in 0..4 {
            for s in 0..6 {
                assert_eq!(safe.policy.dist(h, s)[SLOW], 1.0);
            }
        }
    }

    #[test]
    fn tabular_shape_and_threshold() {
        for seed in 1..=5 {
            let (cmdp, safe) = gen_tabular(seed).unwrap();
            assert_eq!((cmdp.num_states(), cmdp.num_actions(), cmdp.horizon()), (5, 3, 4));
            assert!(cmdp.is_tabular());
            let (_, max_u) = dp_optimal(&cmdp, cmdp.utility()).unwrap();
            assert_abs_diff_eq!(cmdp.threshold() / max_u, 0.6, epsilon = 1e-12);
            assert_abs_diff_eq!(safe.slack, 0.4 * max_u, epsilon = 1e-10);
        }
    }

    #[test]
    fn linear_rejects_small_state_space() {
        assert!(gen_linear(1, 5, 5).is_err());
    }

    #[test]
    fn no_slack_is_reported() {
        let (cmdp, _) = gen_streaming(2).unwrap();
        let tight = cmdp.with_threshold(4.0).unwrap();
        assert!(matches!(derive_safe_policy(&tight), Err(Error::NoSlack { .. })));
    }
}
