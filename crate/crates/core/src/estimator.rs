//! Per-step ridge regression over observed transitions: Gram matrices,
//! elliptical bonuses and next-step value regression.
//!
//! The regression target `sum_i phi(s_i, a_i) V(s'_i)` only depends on the
//! next states, so alongside the ordered transition log each step keeps the
//! feature sums grouped by next state. Regressing a value function then costs
//! `O(#distinct next states * d)` instead of `O(#episodes * d)`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3};

use crate::cmdp::Transition;
use crate::error::{Error, Result};
use crate::linalg::Gram;

#[derive(Debug, Clone)]
struct StepStats {
    gram: Gram,
    data: Vec<Transition>,
    by_next_state: BTreeMap<usize, Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    rho: f64,
    features: Array3<f64>,
    steps: Vec<StepStats>,
    /// `beta_h(s, a)` for every enumerated `(h, s, a)`, refreshed on record.
    bonus_cache: Array3<f64>,
    episodes: usize,
}

impl EstimatorState {
    /// `features` is the known `(S, A, d)` feature table.
    pub fn new(features: Array3<f64>, horizon: usize, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!("ridge coefficient must be positive, got {rho}")));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        let (ns, na, d) = features.dim();
        let steps = (0..horizon)
            .map(|_| StepStats {
                gram: Gram::new(d, rho),
                data: Vec::new(),
                by_next_state: BTreeMap::new(),
            })
            .collect();
        let mut est = Self {
            rho,
            features,
            steps,
            bonus_cache: Array3::zeros((horizon, ns, na)),
            episodes: 0,
        };
        est.refresh_bonus_cache();
        Ok(est)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.features.dim().2
    }

    pub fn num_states(&self) -> usize {
        self.features.dim().0
    }

    pub fn num_actions(&self) -> usize {
        self.features.dim().1
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn feature(&self, s: usize, a: usize) -> ArrayView1<'_, f64> {
        self.features.slice(ndarray::s![s, a, ..])
    }

    pub fn gram(&self, h: usize) -> &Array2<f64> {
        self.steps[h].gram.matrix()
    }

    pub fn cholesky(&self, h: usize) -> &Array2<f64> {
        self.steps[h].gram.cholesky()
    }

    pub fn data(&self, h: usize) -> &[Transition] {
        &self.steps[h].data
    }

    /// Distinct next states observed at step `h`, in increasing order.
    pub fn next_states(&self, h: usize) -> impl Iterator<Item = usize> + '_ {
        self.steps[h].by_next_state.keys().copied()
    }

    pub fn num_next_states(&self, h: usize) -> usize {
        self.steps[h].by_next_state.len()
    }

    /// Appends one episode and applies the rank-one Gram updates.
    pub fn record_episode(&mut self, trajectory: &[Transition]) -> Result<()> {
        if trajectory.len() != self.horizon() {
            return Err(Error::invalid(format!(
                "trajectory has {} steps, expected {}",
                trajectory.len(),
                self.horizon()
            )));
        }
        let (ns, na, _) = self.features.dim();
        if let Some(t) = trajectory
            .iter()
            .find(|t| t.state >= ns || t.next_state >= ns || t.action >= na)
        {
            return Err(Error::invalid(format!("transition {t:?} out of range")));
        }
        for (step, t) in self.steps.iter_mut().zip(trajectory) {
            let phi = self.features.slice(ndarray::s![t.state, t.action, ..]);
            step.gram.add_outer(phi);
            step.data.push(*t);
            step.by_next_state
                .entry(t.next_state)
                .and_modify(|acc| *acc += &phi)
                .or_insert_with(|| phi.to_owned());
        }
        self.episodes += 1;
        self.refresh_bonus_cache();
        Ok(())
    }

    fn refresh_bonus_cache(&mut self) {
        let (ns, na, _) = self.features.dim();
        for h in 0..self.horizon() {
            for s in 0..ns {
                for a in 0..na {
                    self.bonus_cache[[h, s, a]] = self.bonus(h, s, a);
                }
            }
        }
    }

    /// `||phi(s,a)||_{Lambda_h^{-1}}`, computed from the factor.
    pub fn bonus(&self, h: usize, s: usize, a: usize) -> f64 {
        self.steps[h].gram.inverse_norm(self.feature(s, a))
    }

    pub fn cached_bonus(&self, h: usize, s: usize, a: usize) -> f64 {
        self.bonus_cache[[h, s, a]]
    }

    pub fn bonus_table(&self) -> ArrayView3<'_, f64> {
        self.bonus_cache.view()
    }

    /// `Lambda_h^{-1} rhs`.
    pub fn solve(&self, h: usize, rhs: ArrayView1<'_, f64>) -> Array1<f64> {
        self.steps[h].gram.solve(rhs)
    }

    /// Ridge weights `Lambda_h^{-1} sum_i phi(s_i, a_i) v_next[i]`, with one
    /// value per recorded transition at step `h`.
    pub fn regress_next_value(&self, h: usize, v_next: &[f64]) -> Result<Array1<f64>> {
        let step = &self.steps[h];
        if v_next.len() != step.data.len() {
            return Err(Error::invalid(format!(
                "{} values for {} recorded transitions",
                v_next.len(),
                step.data.len()
            )));
        }
        let mut rhs = Array1::<f64>::zeros(self.dim());
        for (t, &v) in step.data.iter().zip(v_next) {
            rhs.scaled_add(v, &self.feature(t.state, t.action));
        }
        Ok(self.solve(h, rhs.view()))
    }

    /// Same regression as [`regress_next_value`](Self::regress_next_value),
    /// with `value_of(s')` evaluated once per distinct next state.
    pub fn regress_by_next_state(&self, h: usize, mut value_of: impl FnMut(usize) -> f64) -> Array1<f64> {
        let mut rhs = Array1::<f64>::zeros(self.dim());
        for (&next, phi_sum) in &self.steps[h].by_next_state {
            rhs.scaled_add(value_of(next), phi_sum);
        }
        self.solve(h, rhs.view())
    }

    /// Right-hand side `sum_i phi_i V(s'_i)` for a value given per distinct
    /// next state (aligned with [`next_states`](Self::next_states)).
    pub(crate) fn grouped_rhs(&self, h: usize, values: &[f64]) -> Array1<f64> {
        let mut rhs = Array1::<f64>::zeros(self.dim());
        for (phi_sum, &v) in self.steps[h].by_next_state.values().zip(values) {
            rhs.scaled_add(v, phi_sum);
        }
        rhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn one_hot(ns: usize, na: usize) -> Array3<f64> {
        Array3::from_shape_fn((ns, na, ns * na), |(s, a, i)| (i == s * na + a) as u8 as f64)
    }

    fn step(state: usize, action: usize, next_state: usize) -> Transition {
        Transition {
            state,
            action,
            next_state,
        }
    }

    #[test]
    fn empty_estimator_has_ridge_identity() {
        let est = EstimatorState::new(one_hot(2, 2), 3, 1.0).unwrap();
        for h in 0..3 {
            assert_eq!(est.gram(h), &Array2::<f64>::eye(4));
        }
        assert_eq!(est.bonus(0, 0, 0), 1.0);
    }

    #[test]
    fn one_transition_on_basis_vector() {
        let mut est = EstimatorState::new(one_hot(2, 2), 1, 1.0).unwrap();
        est.record_episode(&[step(0, 0, 1)]).unwrap();
        let mut expected = Array2::<f64>::eye(4);
        expected[[0, 0]] = 2.0;
        assert_eq!(est.gram(0), &expected);
        assert_abs_diff_eq!(est.bonus(0, 0, 0), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(est.cached_bonus(0, 0, 0), 0.70711, epsilon = 1e-5);
        assert_eq!(est.bonus(0, 1, 1), 1.0);
    }

    #[test]
    fn wrong_length_trajectory_rejected() {
        let mut est = EstimatorState::new(one_hot(2, 2), 2, 1.0).unwrap();
        assert!(est.record_episode(&[step(0, 0, 1)]).is_err());
        assert!(est.record_episode(&[step(0, 0, 1), step(1, 5, 0)]).is_err());
        assert_eq!(est.episodes(), 0);
    }

    #[test]
    fn regression_without_data_is_zero() {
        let est = EstimatorState::new(one_hot(2, 2), 2, 1.0).unwrap();
        assert_eq!(est.regress_next_value(0, &[]).unwrap(), Array1::<f64>::zeros(4));
        assert!(est.regress_next_value(0, &[1.0]).is_err());
    }

    #[test]
    fn scalar_ridge_regression() {
        let features = Array3::from_elem((1, 1, 1), 1.0);
        let mut est = EstimatorState::new(features, 1, 1.0).unwrap();
        est.record_episode(&[step(0, 0, 0)]).unwrap();
        let w = est.regress_next_value(0, &[2.0]).unwrap();
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tabular_regression_is_shrunk_empirical_mean() {
        let mut est = EstimatorState::new(one_hot(3, 1), 1, 1.0).unwrap();
        let nexts = [0, 2, 2, 1, 2];
        for &n in &nexts {
            est.record_episode(&[step(1, 0, n)]).unwrap();
        }
        let v = [1.0, 3.0, 0.5];
        let targets: Vec<f64> = est.data(0).iter().map(|t| v[t.next_state]).collect();
        let w = est.regress_next_value(0, &targets).unwrap();
        let mean = nexts.iter().map(|&n| v[n]).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(est.feature(1, 0).dot(&w), 5.0 / 6.0 * mean, epsilon = 1e-14);
        let grouped = est.regress_by_next_state(0, |s| v[s]);
        for (a, b) in grouped.iter().zip(w.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn data_length_tracks_episodes() {
        let mut est = EstimatorState::new(one_hot(2, 2), 2, 1.0).unwrap();
        for _ in 0..3 {
            est.record_episode(&[step(0, 1, 1), step(1, 0, 0)]).unwrap();
        }
        assert_eq!(est.data(1).len(), 3);
        assert_eq!(est.episodes(), 3);
        assert_eq!(est.next_states(0).collect::<Vec<_>>(), vec![1]);
    }
}
