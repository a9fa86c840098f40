use ndarray::Array3;

use crate::cmdp::{initial_value, ExplicitPolicy, LinearCmdp};
use crate::error::{Error, Result};
use crate::lpsolve::simplex::{solve, LpStatus, Sense, StandardLp};

const VERIFY_TOL: f64 = 1e-7;

/// Normalizes per-state action masses into a policy; states without mass
/// get the uniform distribution.
pub(crate) fn policy_from_occupancy(w: &Array3<f64>) -> ExplicitPolicy {
    let (horizon, ns, na) = w.dim();
    let mut probs = Array3::<f64>::zeros((horizon, ns, na));
    for h in 0..horizon {
        for s in 0..ns {
            let mass: f64 = (0..na).map(|a| w[[h, s, a]].max(0.0)).sum();
            for a in 0..na {
                probs[[h, s, a]] = if mass > 0.0 {
                    w[[h, s, a]].max(0.0) / mass
                } else {
                    1.0 / na as f64
                };
            }
        }
    }
    ExplicitPolicy::from_rows_unchecked(probs)
}

/// Best policy among those whose utility value clears the threshold,
/// computed by the occupancy-measure LP. Returns the policy and its exact
/// reward value.
pub fn optimal_safe_policy(cmdp: &LinearCmdp) -> Result<(ExplicitPolicy, f64)> {
    let (horizon, ns, na) = (cmdp.horizon(), cmdp.num_states(), cmdp.num_actions());
    let var = |h: usize, s: usize, a: usize| (h * ns + s) * na + a;
    let reward = cmdp.reward();
    let utility = cmdp.utility();
    let objective: Vec<f64> = ndarray::indices((horizon, ns, na))
        .into_iter()
        .map(|(h, s, a)| reward[[h, s, a]])
        .collect();
    let mut lp = StandardLp::new(Sense::Maximize, objective);

    for s in 0..ns {
        let row: Vec<(usize, f64)> = (0..na).map(|a| (var(0, s, a), 1.0)).collect();
        lp.add_eq(&row, if s == cmdp.initial_state() { 1.0 } else { 0.0 });
    }
    for h in 0..horizon - 1 {
        for next in 0..ns {
            let mut row: Vec<(usize, f64)> = (0..na).map(|a| (var(h + 1, next, a), 1.0)).collect();
            for s in 0..ns {
                for a in 0..na {
                    let p = cmdp.transitions()[[h, s, a, next]];
                    if p != 0.0 {
                        row.push((var(h, s, a), -p));
                    }
                }
            }
            lp.add_eq(&row, 0.0);
        }
    }
    let utility_row: Vec<(usize, f64)> = ndarray::indices((horizon, ns, na))
        .into_iter()
        .map(|(h, s, a)| (var(h, s, a), utility[[h, s, a]]))
        .collect();
    lp.add_ge(&utility_row, cmdp.threshold());

    let solution = solve(&lp)?;
    match solution.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(Error::Infeasible),
        LpStatus::Unbounded => {
            return Err(Error::SolverFailure("occupancy LP reported unbounded".into()));
        }
    }
    let w = Array3::from_shape_vec((horizon, ns, na), solution.x).expect("LP variable count matches");
    let policy = policy_from_occupancy(&w);
    let value = initial_value(cmdp, &policy, reward)?;
    if (value - solution.objective).abs() > VERIFY_TOL {
        return Err(Error::SolverFailure(format!(
            "extracted policy evaluates to {value}, LP objective was {}",
            solution.objective
        )));
    }
    Ok((policy, value))
}
