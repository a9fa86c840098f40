//! Extended occupancy LP of the tabular DOPE baseline.
//!
//! Variables are joint step probabilities `z_h(s, a, s')`. The transition
//! confidence set is `|P'(s'|s,a) - P_hat(s'|s,a)| <= gamma_h(s,a,s')` with
//! the empirical-Bernstein width
//! `gamma = sqrt(P_hat (1 - P_hat) / (n v 1)) + 1 / (n v 1)`, constants and
//! logarithms dropped. An unvisited pair has `gamma = 1` for every next state,
//! so its confidence set is the whole simplex and its bonus is `|S|`.

use ndarray::{Array3, Array4, ArrayView3};

use crate::cmdp::{ExplicitPolicy, Transition};
use crate::error::{Error, Result};
use crate::lpsolve::occupancy::policy_from_occupancy;
use crate::lpsolve::simplex::{Sense, StandardLp};

/// Visitation counts `n_h(s, a, s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    counts: Array4<u64>,
    visits: Array3<u64>,
}

impl TransitionCounts {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            counts: Array4::zeros((horizon, num_states, num_actions, num_states)),
            visits: Array3::zeros((horizon, num_states, num_actions)),
        }
    }

    pub fn record(&mut self, trajectory: &[Transition]) -> Result<()> {
        let (horizon, ns, na, _) = self.counts.dim();
        if trajectory.len() != horizon {
            return Err(Error::invalid("trajectory length differs from the horizon"));
        }
        if trajectory.iter().any(|t| t.state >= ns || t.next_state >= ns || t.action >= na) {
            return Err(Error::invalid("transition out of range"));
        }
        for (h, t) in trajectory.iter().enumerate() {
            self.counts[[h, t.state, t.action, t.next_state]] += 1;
            self.visits[[h, t.state, t.action]] += 1;
        }
        Ok(())
    }

    pub fn count(&self, h: usize, s: usize, a: usize, next: usize) -> u64 {
        self.counts[[h, s, a, next]]
    }

    pub fn visits(&self, h: usize, s: usize, a: usize) -> u64 {
        self.visits[[h, s, a]]
    }

    pub fn counts(&self) -> &Array4<u64> {
        &self.counts
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (h, s, a, _) = self.counts.dim();
        (h, s, a)
    }

    /// `P_hat = n(s,a,s') / (n(s,a) v 1)`.
    pub fn empirical(&self) -> Array4<f64> {
        Array4::from_shape_fn(self.counts.dim(), |(h, s, a, n)| {
            self.counts[[h, s, a, n]] as f64 / self.visits[[h, s, a]].max(1) as f64
        })
    }

    /// `gamma = sqrt(P_hat (1 - P_hat) / (n v 1)) + 1 / (n v 1)`.
    pub fn widths(&self) -> Array4<f64> {
        let p_hat = self.empirical();
        Array4::from_shape_fn(self.counts.dim(), |(h, s, a, n)| {
            let p = p_hat[[h, s, a, n]];
            let visits = self.visits[[h, s, a]].max(1) as f64;
            (p * (1.0 - p) / visits).sqrt() + 1.0 / visits
        })
    }
}

#[derive(Debug, Clone)]
pub struct DopeProblem<'a> {
    pub counts: &'a TransitionCounts,
    pub reward: ArrayView3<'a, f64>,
    pub utility: ArrayView3<'a, f64>,
    pub initial_state: usize,
    pub threshold: f64,
    pub c_r: f64,
    pub c_u: f64,
}

#[derive(Debug, Clone)]
pub struct DopeSolution {
    pub policy: ExplicitPolicy,
    /// State-action marginals `sum_s' z_h(s, a, s')` of the optimal `z`.
    pub occupancy: Array3<f64>,
    /// `sum z (u - C_u beta) - b`; nonnegative up to solver tolerance.
    pub constraint_margin: f64,
    pub objective: f64,
    /// Multiplier of the utility row at the optimum.
    pub lambda: f64,
}

/// `(h, s, a, s')` of every LP column, in row-major order.
pub type Column = (usize, usize, usize, usize);

struct Prepared {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    initial_state: usize,
    /// Next states with a nonzero upper bound per `(h, s, a)`, and their
    /// clamped bounds.
    next: Vec<Vec<usize>>,
    lo: Vec<Vec<f64>>,
    hi: Vec<Vec<f64>>,
    objective: Array3<f64>,
    constraint: Array3<f64>,
    constraint_norm: f64,
}

impl Prepared {
    fn new(problem: &DopeProblem<'_>) -> Result<Self> {
        let (horizon, ns, na) = problem.counts.dims();
        if problem.reward.dim() != (horizon, ns, na) || problem.utility.dim() != (horizon, ns, na) {
            return Err(Error::invalid("reward/utility tables do not match the counts"));
        }
        if problem.initial_state >= ns {
            return Err(Error::invalid("initial state out of range"));
        }
        let p_hat = problem.counts.empirical();
        let gamma = problem.counts.widths();
        let mut next = Vec::with_capacity(horizon * ns * na);
        let mut lo = Vec::with_capacity(horizon * ns * na);
        let mut hi = Vec::with_capacity(horizon * ns * na);
        let mut objective = Array3::zeros((horizon, ns, na));
        let mut constraint = Array3::zeros((horizon, ns, na));
        let mut norm_sq = 0.0;
        for (h, s, a) in ndarray::indices((horizon, ns, na)) {
            let observed: Vec<usize> = (0..ns)
                .filter(|&n| p_hat[[h, s, a, n]] + gamma[[h, s, a, n]] > 0.0)
                .collect();
            let beta: f64 = (0..ns).map(|n| gamma[[h, s, a, n]]).sum();
            objective[[h, s, a]] = problem.reward[[h, s, a]] + problem.c_r * beta;
            constraint[[h, s, a]] = problem.utility[[h, s, a]] - problem.c_u * beta;
            norm_sq += observed.len() as f64 * constraint[[h, s, a]].powi(2);
            lo.push(
                observed
                    .iter()
                    .map(|&n| (p_hat[[h, s, a, n]] - gamma[[h, s, a, n]]).max(0.0))
                    .collect(),
            );
            hi.push(
                observed
                    .iter()
                    .map(|&n| (p_hat[[h, s, a, n]] + gamma[[h, s, a, n]]).min(1.0))
                    .collect(),
            );
            next.push(observed);
        }
        Ok(Self {
            horizon,
            num_states: ns,
            num_actions: na,
            initial_state: problem.initial_state,
            next,
            lo,
            hi,
            objective,
            constraint,
            constraint_norm: norm_sq.sqrt(),
        })
    }

    fn index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    /// Best kernel in the confidence set for continuation values `v`, and
    /// its value; `-inf` when mass must go to a dead state.
    fn inner_max(&self, idx: usize, v: &[f64]) -> (f64, Vec<f64>) {
        let next = &self.next[idx];
        let (lo, hi) = (&self.lo[idx], &self.hi[idx]);
        let mut order: Vec<usize> = (0..next.len()).collect();
        order.sort_by(|&i, &j| v[next[j]].total_cmp(&v[next[i]]).then(i.cmp(&j)));
        let mut p = lo.clone();
        let mut rest = (1.0 - lo.iter().sum::<f64>()).max(0.0);
        for &i in &order {
            let add = (hi[i] - lo[i]).min(rest);
            p[i] += add;
            rest -= add;
        }
        let mut value = 0.0;
        for (i, &n) in next.iter().enumerate() {
            if p[i] > 0.0 {
                if v[n] == f64::NEG_INFINITY {
                    return (f64::NEG_INFINITY, p);
                }
                value += p[i] * v[n];
            }
        }
        (value, p)
    }

    /// Maximizes `weights . z` over the flow polytope intersected with the
    /// confidence set by extended value iteration. `None` when the polytope
    /// is empty.
    fn extreme(&self, weights: &Array3<f64>) -> Option<Vertex> {
        let (horizon, ns, na) = (self.horizon, self.num_states, self.num_actions);
        let mut v_next = vec![0.0; ns];
        let mut choice: Vec<Vec<Option<(usize, Vec<f64>)>>> = vec![vec![None; ns]; horizon];
        for h in (0..horizon).rev() {
            let mut v = vec![f64::NEG_INFINITY; ns];
            for s in 0..ns {
                for a in 0..na {
                    let idx = self.index(h, s, a);
                    if self.next[idx].is_empty() {
                        continue;
                    }
                    let (cont, kernel) = self.inner_max(idx, &v_next);
                    let total = weights[[h, s, a]] + cont;
                    if total > v[s] {
                        v[s] = total;
                        choice[h][s] = Some((a, kernel));
                    }
                }
            }
            v_next = v;
        }
        if v_next[self.initial_state] == f64::NEG_INFINITY {
            return None;
        }
        let mut occupancy = Array3::<f64>::zeros((horizon, ns, na));
        let mut mass = vec![0.0; ns];
        mass[self.initial_state] = 1.0;
        for h in 0..horizon {
            let mut next_mass = vec![0.0; ns];
            for s in 0..ns {
                if mass[s] == 0.0 {
                    continue;
                }
                let (a, kernel) = choice[h][s].as_ref().expect("reachable states have a finite value");
                occupancy[[h, s, *a]] += mass[s];
                for (&n, &p) in self.next[self.index(h, s, *a)].iter().zip(kernel) {
                    next_mass[n] += mass[s] * p;
                }
            }
            mass = next_mass;
        }
        let objective = (&occupancy * &self.objective).sum();
        let constraint = (&occupancy * &self.constraint).sum();
        Some(Vertex {
            occupancy,
            objective,
            constraint,
        })
    }
}

struct Vertex {
    occupancy: Array3<f64>,
    objective: f64,
    constraint: f64,
}

const MAX_LAMBDA: f64 = 1e15;
const BISECTION_ITERS: usize = 200;

/// Solves the optimistic-pessimistic extended LP. `Err(Error::Infeasible)`
/// means no policy passes the pessimistic constraint under the current
/// confidence set.
///
/// The LP is solved through its Lagrangian in the utility row: for a fixed
/// multiplier the inner maximization over the flow polytope and the
/// confidence set is extended value iteration, and the optimal multiplier is
/// bracketed by bisection until both ends are optimal at it. The optimal `z`
/// is then the mixture of the two bracket vertices that makes the utility
/// row tight. [`dope_lp`] states the same program for the simplex solver.
pub fn dope_policy(problem: &DopeProblem<'_>) -> Result<DopeSolution> {
    let prep = Prepared::new(problem)?;
    let b = problem.threshold;
    let feasible = prep.extreme(&prep.constraint).ok_or(Error::Infeasible)?;
    if feasible.constraint < b {
        return Err(Error::Infeasible);
    }
    let combined = |lambda: f64| &prep.objective + &(&prep.constraint * lambda);
    let unconstrained = prep.extreme(&prep.objective).expect("polytope is nonempty");
    if unconstrained.constraint >= b {
        return finish(&prep, b, unconstrained, None, 0.0);
    }
    let (mut lo, mut lo_vertex) = (0.0, unconstrained);
    let mut hi = 1.0;
    let mut hi_vertex = loop {
        let vertex = prep.extreme(&combined(hi)).expect("polytope is nonempty");
        if vertex.constraint >= b {
            break vertex;
        }
        if hi > MAX_LAMBDA {
            break feasible;
        }
        lo = hi;
        lo_vertex = vertex;
        hi *= 2.0;
    };
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-13 * hi {
            break;
        }
        let vertex = prep.extreme(&combined(mid)).expect("polytope is nonempty");
        if vertex.constraint >= b {
            hi = mid;
            hi_vertex = vertex;
        } else {
            lo = mid;
            lo_vertex = vertex;
        }
    }
    finish(&prep, b, hi_vertex, Some(lo_vertex), hi)
}

fn finish(prep: &Prepared, b: f64, feasible: Vertex, other: Option<Vertex>, lambda: f64) -> Result<DopeSolution> {
    let (occupancy, objective, constraint) = match other {
        None => (feasible.occupancy, feasible.objective, feasible.constraint),
        Some(low) => {
            let alpha = (feasible.constraint - b) / (feasible.constraint - low.constraint);
            (
                &low.occupancy * alpha + &feasible.occupancy * (1.0 - alpha),
                alpha * low.objective + (1.0 - alpha) * feasible.objective,
                alpha * low.constraint + (1.0 - alpha) * feasible.constraint,
            )
        }
    };
    let margin = constraint - b;
    if margin < -RESIDUAL_TOL * (1.0 + prep.constraint_norm) {
        return Err(Error::SolverFailure(format!(
            "utility row violated by {:.3e} at the returned solution",
            -margin
        )));
    }
    Ok(DopeSolution {
        policy: policy_from_occupancy(&occupancy),
        occupancy,
        constraint_margin: margin,
        objective,
        lambda,
    })
}

const RESIDUAL_TOL: f64 = 1e-8;

/// The extended LP over `z_h(s, a, s')` in the form accepted by
/// [`solve`](crate::lpsolve::solve), with its column layout. Transitions
/// whose upper bound is zero get no column.
pub fn dope_lp(problem: &DopeProblem<'_>) -> Result<(StandardLp, Vec<Column>)> {
    let prep = Prepared::new(problem)?;
    let (horizon, ns, na) = (prep.horizon, prep.num_states, prep.num_actions);
    let p_hat = problem.counts.empirical();
    let gamma = problem.counts.widths();

    let mut columns: Vec<Column> = Vec::new();
    for (h, s, a) in ndarray::indices((horizon, ns, na)) {
        columns.extend(prep.next[prep.index(h, s, a)].iter().map(|&n| (h, s, a, n)));
    }
    let objective: Vec<f64> = columns.iter().map(|&(h, s, a, _)| prep.objective[[h, s, a]]).collect();
    let mut lp = StandardLp::new(Sense::Maximize, objective);

    let mut flow: Vec<Vec<(usize, f64)>> = vec![Vec::new(); horizon * ns];
    for (j, &(h, s, _, n)) in columns.iter().enumerate() {
        flow[h * ns + s].push((j, 1.0));
        if h + 1 < horizon {
            flow[(h + 1) * ns + n].push((j, -1.0));
        }
    }
    for h in 0..horizon {
        for s in 0..ns {
            let rhs = if h == 0 && s == problem.initial_state { 1.0 } else { 0.0 };
            lp.add_eq(&flow[h * ns + s], rhs);
        }
    }

    // |z - P_hat q| <= gamma q with q the group sum; rows implied by
    // z >= 0 or z <= q are left out.
    let mut start = 0;
    while start < columns.len() {
        let (h, s, a, _) = columns[start];
        let end = start + prep.next[prep.index(h, s, a)].len();
        if end - start > 1 {
            for j in start..end {
                let n = columns[j].3;
                let lo = p_hat[[h, s, a, n]] - gamma[[h, s, a, n]];
                let hi = p_hat[[h, s, a, n]] + gamma[[h, s, a, n]];
                if lo > 0.0 {
                    let row: Vec<(usize, f64)> =
                        (start..end).map(|i| (i, if i == j { 1.0 - lo } else { -lo })).collect();
                    lp.add_ge(&row, 0.0);
                }
                if hi < 1.0 {
                    let row: Vec<(usize, f64)> =
                        (start..end).map(|i| (i, if i == j { hi - 1.0 } else { hi })).collect();
                    lp.add_ge(&row, 0.0);
                }
            }
        }
        start = end;
    }

    let constraint: Vec<(usize, f64)> = columns
        .iter()
        .enumerate()
        .map(|(j, &(h, s, a, _))| (j, prep.constraint[[h, s, a]]))
        .collect();
    lp.add_ge(&constraint, problem.threshold);
    Ok((lp, columns))
}
