//! Instance generators, independent oracles and invariant checks shared by
//! the integration test targets.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safe_lcmdp::agent::KnownModel;
use safe_lcmdp::baselines::{GhoshConfig, UniformAgent};
use safe_lcmdp::cmdp::{
    evaluate_policy, initial_value, occupancy, sample_trajectory, softmax_distribution, ExplicitPolicy, LinearCmdp,
};
use safe_lcmdp::estimator::EstimatorState;
use safe_lcmdp::harness::{simulate, SimulationOptions};
use safe_lcmdp::lpsolve::{optimal_safe_policy, solve, LpStatus, Sense, StandardLp};
use safe_lcmdp::opse::{backward_pass, evaluate_heads, HeadParams, HeadRow, OpseConfig};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tabular CMDP with one-hot features and positive transitions; the
/// threshold is `frac * max_pi V^u`.
pub fn random_tabular(ns: usize, na: usize, horizon: usize, frac: f64, seed: u64) -> LinearCmdp {
    let mut rng = rng(seed);
    let d = ns * na;
    let features = Array3::from_shape_fn((ns, na, d), |(s, a, i)| if i == s * na + a { 1.0 } else { 0.0 });
    let mut transitions = Array4::<f64>::zeros((horizon, ns, na, ns));
    for mut row in transitions.lanes_mut(Axis(3)) {
        let raw: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        for (dst, v) in row.iter_mut().zip(&raw) {
            *dst = v / total;
        }
    }
    let theta_r = Array2::from_shape_fn((horizon, d), |_| rng.random::<f64>());
    let theta_u = Array2::from_shape_fn((horizon, d), |_| rng.random::<f64>());
    let s1 = rng.random_range(0..ns);
    let cmdp = LinearCmdp::new(features, transitions, theta_r, theta_u, 0.0, s1).unwrap();
    let max_u = max_value(&cmdp, cmdp.utility());
    cmdp.with_threshold(frac * max_u).unwrap()
}

/// Random policy with every row drawn from a flat Dirichlet-like law.
pub fn random_policy(horizon: usize, ns: usize, na: usize, rng: &mut ChaCha8Rng) -> ExplicitPolicy {
    let mut probs = Array3::<f64>::zeros((horizon, ns, na));
    for mut row in probs.lanes_mut(Axis(2)) {
        let raw: Vec<f64> = (0..na).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let total: f64 = raw.iter().sum();
        for (dst, v) in row.iter_mut().zip(&raw) {
            *dst = v / total;
        }
    }
    ExplicitPolicy::new(probs).unwrap()
}

/// Plain backward induction, written independently of the library.
pub fn max_value(cmdp: &LinearCmdp, g: ndarray::ArrayView3<'_, f64>) -> f64 {
    let (horizon, ns, na) = (cmdp.horizon(), cmdp.num_states(), cmdp.num_actions());
    let mut v = vec![0.0; ns];
    for h in (0..horizon).rev() {
        let mut next = vec![f64::NEG_INFINITY; ns];
        for s in 0..ns {
            for a in 0..na {
                let p = cmdp.next_state_distribution(h, s, a);
                let q = g[[h, s, a]] + p.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>();
                next[s] = next[s].max(q);
            }
        }
        v = next;
    }
    v[cmdp.initial_state()]
}

/// Every deterministic Markov policy of a small CMDP.
pub fn deterministic_policies(cmdp: &LinearCmdp) -> Vec<ExplicitPolicy> {
    let (horizon, ns, na) = (cmdp.horizon(), cmdp.num_states(), cmdp.num_actions());
    let cells = horizon * ns;
    let total = na.pow(cells as u32);
    (0..total)
        .map(|mut code| {
            let actions = Array2::from_shape_fn((horizon, ns), |_| {
                let a = code % na;
                code /= na;
                a
            });
            ExplicitPolicy::deterministic(&actions, na)
        })
        .collect()
}

/// Best value of a mixture of at most two deterministic policies whose
/// utility clears `b`. Occupancy-level mixtures make both values linear in
/// the weight, so the one-dimensional search has a closed form.
pub fn pairwise_mixture_optimum(cmdp: &LinearCmdp) -> f64 {
    let b = cmdp.threshold();
    let mut points: Vec<(f64, f64)> = deterministic_policies(cmdp)
        .iter()
        .map(|pi| {
            (
                initial_value(cmdp, pi, cmdp.reward()).unwrap(),
                initial_value(cmdp, pi, cmdp.utility()).unwrap(),
            )
        })
        .collect();
    points.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    points.dedup_by(|x, y| (x.0 - y.0).abs() < 1e-13 && (x.1 - y.1).abs() < 1e-13);
    let feasible: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.1 >= b).collect();
    let infeasible: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.1 < b).collect();
    let mut best = feasible.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    for &(r_hi, u_hi) in &feasible {
        for &(r_lo, u_lo) in &infeasible {
            if r_lo <= r_hi {
                continue;
            }
            let alpha = (b - u_lo) / (u_hi - u_lo);
            best = best.max(alpha * r_hi + (1.0 - alpha) * r_lo);
        }
    }
    best
}

/// Random bounded LP in at most `n` variables together with its optimum by
/// brute-force vertex enumeration (`None` when infeasible).
pub struct RandomLp {
    pub lp: StandardLp,
    pub optimum: Option<f64>,
}

pub fn random_lp(seed: u64) -> RandomLp {
    let mut rng = rng(seed);
    let n = rng.random_range(2..=4);
    let sense = if rng.random_bool(0.5) { Sense::Maximize } else { Sense::Minimize };
    let objective: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut lp = StandardLp::new(sense, objective.clone());
    // Dense constraint list in `row . x >= rhs` form for the enumeration.
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        rows.push((e.clone(), 0.0, false));
        let cap = rng.random_range(1.0..5.0);
        lp.add_le(&[(j, 1.0)], cap);
        rows.push((e.iter().map(|v| -v).collect(), -cap, false));
    }
    for _ in 0..rng.random_range(1..=4) {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rhs = rng.random_range(-2.0..4.0);
        let entries: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        match rng.random_range(0..3) {
            0 => {
                lp.add_ge(&entries, rhs);
                rows.push((row, rhs, false));
            }
            1 => {
                lp.add_le(&entries, rhs);
                rows.push((row.iter().map(|v| -v).collect(), -rhs, false));
            }
            _ => {
                lp.add_eq(&entries, rhs);
                rows.push((row, rhs, true));
            }
        }
    }
    let optimum = enumerate_vertices(n, &rows, &objective, sense);
    RandomLp { lp, optimum }
}

fn enumerate_vertices(n: usize, rows: &[(Vec<f64>, f64, bool)], c: &[f64], sense: Sense) -> Option<f64> {
    let m = rows.len();
    let mut best: Option<f64> = None;
    let mut subset: Vec<usize> = (0..n).collect();
    loop {
        let equalities_covered = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.2)
            .all(|(i, _)| subset.contains(&i));
        if equalities_covered {
            let a = DMatrix::from_fn(n, n, |i, j| rows[subset[i]].0[j]);
            let b = DVector::from_fn(n, |i, _| rows[subset[i]].1);
            if let Some(x) = a.lu().solve(&b) {
                let feasible = rows.iter().all(|(row, rhs, eq)| {
                    let lhs: f64 = row.iter().zip(x.iter()).map(|(a, x)| a * x).sum();
                    if *eq {
                        (lhs - rhs).abs() <= 1e-9
                    } else {
                        lhs >= rhs - 1e-9
                    }
                });
                if feasible && x.iter().all(|v| v.is_finite()) {
                    let value: f64 = c.iter().zip(x.iter()).map(|(c, x)| c * x).sum();
                    best = Some(match (best, sense) {
                        (None, _) => value,
                        (Some(v), Sense::Maximize) => v.max(value),
                        (Some(v), Sense::Minimize) => v.min(value),
                    });
                }
            }
        }
        // Next n-subset of 0..m in lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] < m - n + i {
                break;
            }
        }
        subset[i] += 1;
        for k in i + 1..n {
            subset[k] = subset[k - 1] + 1;
        }
    }
}

pub fn check_lp_against_vertices(seed: u64) -> Check {
    let RandomLp { lp, optimum } = random_lp(seed);
    let sol = solve(&lp).map_err(|e| format!("seed {seed}: {e}"))?;
    match (sol.status, optimum) {
        (LpStatus::Optimal, Some(v)) => {
            if (sol.objective - v).abs() > 1e-6 {
                return Err(format!("seed {seed}: simplex {} vs vertices {v}", sol.objective));
            }
            let (residual, bound) = lp.residuals(&sol.x);
            if residual > 1e-8 || bound < -1e-8 {
                return Err(format!("seed {seed}: residual {residual:e}, bound slack {bound:e}"));
            }
            Ok(())
        }
        (LpStatus::Infeasible, None) => Ok(()),
        (status, v) => Err(format!("seed {seed}: simplex {status:?}, vertices {v:?}")),
    }
}

pub fn check_safe_policy_against_mixtures(seed: u64) -> Check {
    let cmdp = random_tabular(4, 2, 3, 0.6, seed);
    let (policy, value) = optimal_safe_policy(&cmdp).map_err(|e| e.to_string())?;
    let reference = pairwise_mixture_optimum(&cmdp);
    if (value - reference).abs() > 1e-4 {
        return Err(format!("seed {seed}: LP {value} vs mixtures {reference}"));
    }
    let exact_u = initial_value(&cmdp, &policy, cmdp.utility()).unwrap();
    if exact_u < cmdp.threshold() - 1e-8 {
        return Err(format!("seed {seed}: extracted policy utility {exact_u} below b"));
    }
    Ok(())
}

/// Random linear features of unit norm or less.
pub fn random_features(ns: usize, na: usize, d: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut f = Array3::<f64>::from_shape_fn((ns, na, d), |_| rng.random_range(-1.0..1.0));
    for mut lane in f.lanes_mut(Axis(2)) {
        let norm: f64 = lane.dot(&lane).sqrt();
        let scale = rng.random_range(0.1..1.0) / norm.max(1e-12);
        lane.mapv_inplace(|v| v * scale);
    }
    f
}

pub fn random_trajectories(
    est: &mut EstimatorState,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<safe_lcmdp::Transition>> {
    let (horizon, ns, na) = (est.horizon(), est.num_states(), est.num_actions());
    (0..episodes)
        .map(|_| {
            let mut s = rng.random_range(0..ns);
            let traj: Vec<safe_lcmdp::Transition> = (0..horizon)
                .map(|_| {
                    let a = rng.random_range(0..na);
                    let next = rng.random_range(0..ns);
                    let t = safe_lcmdp::Transition {
                        state: s,
                        action: a,
                        next_state: next,
                    };
                    s = next;
                    t
                })
                .collect();
            est.record_episode(&traj).unwrap();
            traj
        })
        .collect()
}

/// From-scratch Gram matrix and its nalgebra Cholesky factor versus the
/// incrementally maintained ones.
pub fn check_incremental_factor(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (ns, na, d, horizon) = (6, 3, 5, 3);
    let features = random_features(ns, na, d, &mut rng);
    let rho = rng.random_range(0.5..2.0);
    let mut est = EstimatorState::new(features.clone(), horizon, rho).unwrap();
    let episodes = rng.random_range(1..400);
    let trajectories = random_trajectories(&mut est, episodes, &mut rng);
    for h in 0..horizon {
        let mut gram = DMatrix::<f64>::identity(d, d) * rho;
        for traj in &trajectories {
            let t = traj[h];
            let phi = DVector::from_iterator(d, features.slice(ndarray::s![t.state, t.action, ..]).iter().copied());
            gram += &phi * phi.transpose();
        }
        let chol = gram.clone().cholesky().ok_or("reference Gram not positive definite")?;
        let l = chol.l();
        for i in 0..d {
            for j in 0..d {
                let scale = 1.0 + gram[(i, j)].abs();
                if (est.gram(h)[[i, j]] - gram[(i, j)]).abs() > 1e-8 * scale {
                    return Err(format!("seed {seed}: Gram entry ({i},{j}) differs"));
                }
                if (est.cholesky(h)[[i, j]] - l[(i, j)]).abs() > 1e-8 * (1.0 + l[(i, j)].abs()) {
                    return Err(format!(
                        "seed {seed}: factor entry ({i},{j}) {} vs {}",
                        est.cholesky(h)[[i, j]],
                        l[(i, j)]
                    ));
                }
            }
        }
        let inverse = gram.try_inverse().ok_or("singular Gram")?;
        for s in 0..ns {
            for a in 0..na {
                let phi = DVector::from_iterator(d, features.slice(ndarray::s![s, a, ..]).iter().copied());
                let reference = (phi.transpose() * &inverse * &phi)[(0, 0)].sqrt();
                if (est.bonus(h, s, a) - reference).abs() > 1e-10 {
                    return Err(format!("seed {seed}: bonus {} vs {reference}", est.bonus(h, s, a)));
                }
            }
        }
    }
    Ok(())
}

/// Best value of `obj . pi` subject to `con . pi >= b` over a simplex grid of
/// step `1 / steps` on three or fewer actions.
pub fn grid_opt_pes(obj: &[f64], con: &[f64], b: f64, steps: usize) -> Option<f64> {
    let n = obj.len();
    let mut best: Option<f64> = None;
    let mut consider = |w: &[f64]| {
        let c: f64 = w.iter().zip(con).map(|(w, c)| w * c).sum();
        if c >= b {
            let v: f64 = w.iter().zip(obj).map(|(w, o)| w * o).sum();
            best = Some(best.map_or(v, |x: f64| x.max(v)));
        }
    };
    match n {
        1 => consider(&[1.0]),
        2 => {
            for i in 0..=steps {
                let x = i as f64 / steps as f64;
                consider(&[x, 1.0 - x]);
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (x, y) = (i as f64 / steps as f64, j as f64 / steps as f64);
                    consider(&[x, y, (1.0 - x - y).max(0.0)]);
                }
            }
        }
        _ => panic!("grid oracle supports at most three actions"),
    }
    best
}

pub fn check_opt_pes_against_grid(seed: u64) -> Check {
    let mut rng = rng(seed);
    let n = rng.random_range(1..=3);
    let obj: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let con: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = rng.random_range(-0.8..0.8);
    let grid = grid_opt_pes(&obj, &con, b, 1000);
    match safe_lcmdp::bandit::solve_opt_pes(&obj, &con, b) {
        Ok((dist, value)) => {
            let grid = grid.ok_or_else(|| format!("seed {seed}: grid found no feasible point"))?;
            let c: f64 = dist.iter().zip(&con).map(|(w, c)| w * c).sum();
            if c < b - 1e-12 {
                return Err(format!("seed {seed}: returned distribution violates the constraint"));
            }
            if value < grid - 1e-12 || value - grid > 2e-3 {
                return Err(format!("seed {seed}: opt-pes {value} vs grid {grid}"));
            }
            Ok(())
        }
        Err(safe_lcmdp::Error::Infeasible) => match grid {
            None => Ok(()),
            Some(g) => Err(format!("seed {seed}: reported infeasible, grid found {g}")),
        },
        Err(e) => Err(e.to_string()),
    }
}

/// Exact utility of the exact-backup composite softmax is nondecreasing on
/// the grid `0, 0.25, ..., 10`.
pub fn check_monotone_in_lambda(seed: u64) -> Check {
    let mut rng = rng(seed);
    let ns = rng.random_range(1..=4);
    let na = rng.random_range(2..=3);
    let horizon = rng.random_range(2..=4);
    let cmdp = random_tabular(ns, na, horizon, 0.5, rng.random());
    let kappa = 0.1;
    let mut previous = f64::NEG_INFINITY;
    for i in 0..=40 {
        let lambda = 0.25 * i as f64;
        let pi = safe_lcmdp::opse::exact_composite_softmax(&cmdp, kappa, lambda).map_err(|e| e.to_string())?;
        let u = initial_value(&cmdp, &pi, cmdp.utility()).unwrap();
        if u < previous - 1e-8 {
            return Err(format!("seed {seed}: utility drops from {previous} to {u} at lambda {lambda}"));
        }
        previous = u;
    }
    Ok(())
}

pub fn check_value_bounds(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (ns, na, horizon) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=5));
    let cmdp = random_tabular(ns, na, horizon, 0.0, rng.random());
    let pi = random_policy(horizon, ns, na, &mut rng);
    let values = evaluate_policy(&cmdp, &pi, cmdp.reward(), 0.0).unwrap();
    for h in 0..horizon {
        for s in 0..ns {
            let v = values.at(h, s);
            if !(v >= -1e-12 && v <= (horizon - h) as f64 + 1e-12) {
                return Err(format!("seed {seed}: V_{h}({s}) = {v} outside [0, {}]", horizon - h));
            }
        }
    }
    Ok(())
}

pub fn check_entropy_gap(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (ns, na, horizon) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=5));
    let cmdp = random_tabular(ns, na, horizon, 0.0, rng.random());
    let pi = random_policy(horizon, ns, na, &mut rng);
    let kappa = rng.random_range(0.0..1.0);
    let s1 = cmdp.initial_state();
    let plain = evaluate_policy(&cmdp, &pi, cmdp.reward(), 0.0).unwrap().at(0, s1);
    let soft = evaluate_policy(&cmdp, &pi, cmdp.reward(), kappa).unwrap().at(0, s1);
    let cap = kappa * horizon as f64 * (na as f64).ln();
    let gap = soft - plain;
    if gap < -1e-12 || gap > cap + 1e-12 {
        return Err(format!("seed {seed}: entropy gap {gap} outside [0, {cap}]"));
    }
    Ok(())
}

pub fn check_occupancy_duality(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (ns, na, horizon) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=5));
    let cmdp = random_tabular(ns, na, horizon, 0.0, rng.random());
    let pi = random_policy(horizon, ns, na, &mut rng);
    let w = occupancy(&cmdp, &pi).unwrap();
    for g in [cmdp.reward(), cmdp.utility()] {
        let direct = initial_value(&cmdp, &pi, g).unwrap();
        let dual = w.integrate(g);
        if (direct - dual).abs() > 1e-9 {
            return Err(format!("seed {seed}: value {direct} vs occupancy {dual}"));
        }
    }
    for h in 0..horizon {
        let mass: f64 = w.w.index_axis(Axis(0), h).sum();
        if (mass - 1.0).abs() > 1e-12 {
            return Err(format!("seed {seed}: step {h} mass {mass}"));
        }
    }
    if w.flow_residual(&cmdp) > 1e-12 {
        return Err(format!("seed {seed}: flow residual {}", w.flow_residual(&cmdp)));
    }
    Ok(())
}

pub fn check_softmax(seed: u64) -> Check {
    let mut rng = rng(seed);
    let n = rng.random_range(1..=8);
    let kappa = rng.random_range(0.01..2.0);
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let eps = rng.random_range(0.0..0.1);
    let q2: Vec<f64> = q.iter().map(|v| v + rng.random_range(-eps..=eps)).collect();
    let p = softmax_distribution(&q, kappa).map_err(|e| e.to_string())?;
    let p2 = softmax_distribution(&q2, kappa).map_err(|e| e.to_string())?;
    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 || p.iter().any(|&x| x < 0.0) {
        return Err(format!("seed {seed}: not a distribution"));
    }
    let l1: f64 = p.iter().zip(&p2).map(|(a, b)| (a - b).abs()).sum();
    let sup = q.iter().zip(&q2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if l1 > 8.0 / kappa * sup + 1e-12 {
        return Err(format!("seed {seed}: L1 gap {l1} exceeds {}", 8.0 / kappa * sup));
    }
    let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
    let top = argmax(&q);
    let tied = q.iter().enumerate().any(|(i, &v)| i != top && (v - q[top]).abs() < 1e-12);
    if !tied && argmax(&p) != top {
        return Err(format!("seed {seed}: argmax moved"));
    }
    Ok(())
}

pub fn check_bonus_monotone(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (ns, na, d, horizon) = (rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=5), 3);
    let features = random_features(ns, na, d, &mut rng);
    let rho = rng.random_range(0.1..3.0);
    let mut est = EstimatorState::new(features, horizon, rho).unwrap();
    let mut before = est.bonus_table().to_owned();
    for _ in 0..rng.random_range(1..30) {
        random_trajectories(&mut est, 1, &mut rng);
        let after = est.bonus_table().to_owned();
        for ((idx, &b1), &b0) in after.indexed_iter().zip(before.iter()) {
            if b1 > b0 + 1e-12 {
                return Err(format!("seed {seed}: bonus at {idx:?} grew from {b0} to {b1}"));
            }
            if !(b1 > 0.0 && b1 <= 1.0 / rho.sqrt() + 1e-12) {
                return Err(format!("seed {seed}: bonus {b1} outside (0, 1/sqrt(rho)]"));
            }
        }
        before = after;
    }
    Ok(())
}

/// Clipping bounds of every head at every `(h, s, a)` after random data, for
/// the agent's pessimistic heads and for the optimistic Ghosh variant.
pub fn check_head_bounds(seed: u64, params: HeadParams) -> Check {
    let mut rng = rng(seed);
    let (ns, na, d, horizon) = (rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=5), 4);
    let features = random_features(ns, na, d, &mut rng);
    let mut est = EstimatorState::new(features.clone(), horizon, 1.0).unwrap();
    random_trajectories(&mut est, rng.random_range(0..60), &mut rng);
    let model = KnownModel {
        horizon,
        features,
        reward: Array3::from_shape_fn((horizon, ns, na), |_| rng.random::<f64>()),
        utility: Array3::from_shape_fn((horizon, ns, na), |_| rng.random::<f64>()),
        initial_state: 0,
        threshold: 1.0,
    };
    let lambda = rng.random_range(0.0..params.lambda_max);
    let weights = backward_pass(&est, &model, &params, lambda).map_err(|e| e.to_string())?;
    let ln_a = (na as f64).ln();
    let mut row = HeadRow::new(na);
    for h in 0..horizon {
        let remaining = (horizon - 1 - h) as f64;
        for s in 0..ns {
            evaluate_heads(&est, &model, &params, &weights.steps[h], lambda, h, s, &mut row);
            for a in 0..na {
                let beta = est.cached_bonus(h, s, a);
                let tol = 1e-12;
                let r_gap = row.q_reward[a] - model.reward[[h, s, a]];
                if r_gap < -tol || r_gap > remaining * (1.0 + params.kappa * ln_a) + tol {
                    return Err(format!("seed {seed}: reward head gap {r_gap} at ({h},{s},{a})"));
                }
                let u_gap = row.q_utility[a] - model.utility[[h, s, a]];
                if u_gap < -tol || u_gap > remaining + tol {
                    return Err(format!("seed {seed}: utility head gap {u_gap} at ({h},{s},{a})"));
                }
                let dagger = row.q_dagger[a];
                let floor = params.b_dagger * beta;
                if dagger < floor - tol || dagger > floor + params.b_dagger * remaining + tol {
                    return Err(format!("seed {seed}: dagger head {dagger} at ({h},{s},{a})"));
                }
            }
            if (row.policy.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(format!("seed {seed}: policy row does not sum to one"));
            }
        }
    }
    Ok(())
}

pub fn opse_params() -> HeadParams {
    OpseConfig::tabular().head_params()
}

pub fn ghosh_params() -> HeadParams {
    GhoshConfig::tabular().head_params()
}

/// Two simulations with the same seed give identical logs and CSV bytes.
pub fn check_determinism(seed: u64) -> Check {
    let cmdp = random_tabular(3, 2, 3, 0.5, seed);
    let (safe_policy, _) = optimal_safe_policy(&cmdp.with_threshold(0.0).unwrap()).unwrap();
    let safe = safe_lcmdp::SafePolicyOracle {
        policy: safe_policy,
        slack: 0.0,
    };
    let options = SimulationOptions {
        episodes: 25,
        seed,
        ..SimulationOptions::default()
    };
    let run = |which: usize| -> Result<String, String> {
        let model = KnownModel::from(&cmdp);
        let log = if which == 0 {
            let mut agent = safe_lcmdp::OpseAgent::new(model, &OpseConfig::tabular(), safe.clone())
                .map_err(|e| e.to_string())?;
            simulate(&cmdp, &mut agent, &options)
        } else {
            let mut agent = UniformAgent::new(&model);
            simulate(&cmdp, &mut agent, &options)
        }
        .map_err(|e| e.to_string())?;
        Ok(log.to_csv())
    };
    for which in 0..2 {
        if run(which)? != run(which)? {
            return Err(format!("seed {seed}: reruns differ"));
        }
    }
    Ok(())
}

/// Counts kept by the DOPE agent equal a recount of the trajectories.
pub fn check_dope_counts(seed: u64) -> Check {
    use safe_lcmdp::Agent;
    let cmdp = random_tabular(3, 2, 3, 0.5, seed);
    let (safe_policy, _) = optimal_safe_policy(&cmdp.with_threshold(0.0).unwrap()).unwrap();
    let safe = safe_lcmdp::SafePolicyOracle {
        policy: safe_policy,
        slack: 0.0,
    };
    let mut agent = safe_lcmdp::baselines::DopeAgent::new(
        KnownModel::from(&cmdp),
        &safe_lcmdp::baselines::DopeConfig::default(),
        safe,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = rng(seed);
    let uniform = ExplicitPolicy::uniform(3, 3, 2);
    let mut recount = Array4::<u64>::zeros((3, 3, 2, 3));
    for _ in 0..50 {
        let traj = sample_trajectory(&cmdp, &uniform, &mut rng).unwrap();
        for (h, t) in traj.iter().enumerate() {
            recount[[h, t.state, t.action, t.next_state]] += 1;
        }
        agent.observe(&traj).map_err(|e| e.to_string())?;
    }
    if agent.counts().counts() != &recount {
        return Err(format!("seed {seed}: counts differ from the recount"));
    }
    Ok(())
}

/// Runs `check` on `cases` consecutive seeds and reports the first failure.
pub fn sweep(cases: u64, offset: u64, check: impl Fn(u64) -> Check) -> Check {
    (offset..offset + cases).try_for_each(check)
}

/// Every non-safe deployment clears the threshold on its utility head, and
/// every bisection probe keeps `V(upper) >= b > V(lower)`.
pub fn check_agent_invariants(seed: u64) -> Check {
    use safe_lcmdp::opse::{pessimistic_utility_at_s1, ChoiceKind};
    use safe_lcmdp::Agent;
    let cmdp = random_tabular(3, 2, 3, 0.7, seed);
    let (safe_policy, _) = optimal_safe_policy(&cmdp.with_threshold(0.0).unwrap()).unwrap();
    let safe = safe_lcmdp::SafePolicyOracle {
        policy: safe_policy,
        slack: 0.0,
    };
    let model = KnownModel::from(&cmdp);
    let b = model.threshold;
    let mut agent = safe_lcmdp::OpseAgent::new(model, &OpseConfig::tabular(), safe).map_err(|e| e.to_string())?;
    let mut rng = rng(seed);
    for k in 0..40 {
        let deployment = agent.act().map_err(|e| e.to_string())?;
        let choice = agent.last_choice().expect("act records its choice");
        if let Some(weights) = &choice.weights {
            let v = pessimistic_utility_at_s1(weights, agent.estimator(), agent.model());
            if v < b || choice.utility_at_s1 < b {
                return Err(format!("seed {seed}, episode {k}: deployed utility head {v} below {b}"));
            }
        } else if choice.kind != ChoiceKind::SafePolicy || !deployment.safe {
            return Err(format!("seed {seed}, episode {k}: weightless choice that is not the safe policy"));
        }
        if let Some(steps) = &choice.bisection {
            let params = agent.params();
            for step in steps {
                let upper = backward_pass(agent.estimator(), agent.model(), params, step.upper).unwrap();
                let lower = backward_pass(agent.estimator(), agent.model(), params, step.lower).unwrap();
                let vu = pessimistic_utility_at_s1(&upper, agent.estimator(), agent.model());
                let vl = pessimistic_utility_at_s1(&lower, agent.estimator(), agent.model());
                if !(vu >= b && b > vl) {
                    return Err(format!("seed {seed}, episode {k}: bracket [{}, {}] lost", step.lower, step.upper));
                }
            }
        }
        let traj = sample_trajectory(&cmdp, &deployment.policy, &mut rng).unwrap();
        agent.observe(&traj).map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Generation is reproducible and every environment is strictly feasible.
pub fn check_env_generation(seed: u64, kind: safe_lcmdp::envs::EnvKind) -> Check {
    use safe_lcmdp::cmdp::EnvironmentDocument;
    let make = || safe_lcmdp::envs::generate(kind, seed, 30, 4).map_err(|e| e.to_string());
    let (cmdp, safe) = make()?;
    let (again, safe_again) = make()?;
    let a = EnvironmentDocument::from_env(&cmdp, &safe).to_json().unwrap();
    let b = EnvironmentDocument::from_env(&again, &safe_again).to_json().unwrap();
    if a != b {
        return Err(format!("seed {seed}: {kind:?} generation not reproducible"));
    }
    let u = initial_value(&cmdp, &safe.policy, cmdp.utility()).unwrap();
    if !(safe.slack > 0.0 && (u - cmdp.threshold() - safe.slack).abs() < 1e-9) {
        return Err(format!("seed {seed}: slack {} against exact utility gap {}", safe.slack, u - cmdp.threshold()));
    }
    Ok(())
}
