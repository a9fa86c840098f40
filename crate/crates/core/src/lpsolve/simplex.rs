//! Dense two-phase tableau simplex; Dantzig pricing with a fallback to
//! Bland's anti-cycling rule on degenerate stalls.
//!
//! Problems are stated as
//!
//! ```text
//! min / max  c.x   s.t.  A x = b_eq,  G x >= h,  x >= lower
//! ```
//!
//! The solver shifts `x` to `x - lower`, adds one surplus column per `>=`
//! row, flips rows so every right-hand side is nonnegative, and puts an
//! artificial variable on every row for phase one. The `>=` right-hand sides
//! are first relaxed by small distinct amounts to break degeneracy; the final
//! basis is then re-solved against the exact rows. If that basis is not
//! feasible for the exact program the solve is repeated unperturbed.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const REDUCED_COST_TOL: f64 = 1e-10;
const PHASE_ONE_TOL: f64 = 1e-9;
const RESIDUAL_TOL: f64 = 1e-8;
const NEGATIVITY_TOL: f64 = 1e-10;
const DEGENERATE_LIMIT: usize = 50;
const PERTURBATION: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardLp {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    /// Rows of `G x >= h`.
    pub ge_rows: Vec<Vec<f64>>,
    pub ge_rhs: Vec<f64>,
    pub lower: Vec<f64>,
}

impl StandardLp {
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self {
            sense,
            objective,
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            ge_rows: Vec::new(),
            ge_rhs: Vec::new(),
            lower: vec![0.0; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn dense(&self, entries: &[(usize, f64)]) -> Vec<f64> {
        let mut row = vec![0.0; self.num_vars()];
        for &(j, v) in entries {
            row[j] += v;
        }
        row
    }

    pub fn add_eq(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let row = self.dense(entries);
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn add_ge(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let row = self.dense(entries);
        self.ge_rows.push(row);
        self.ge_rhs.push(rhs);
    }

    /// Stored as `-row . x >= -rhs`.
    pub fn add_le(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let row: Vec<f64> = self.dense(entries).into_iter().map(|v| -v).collect();
        self.ge_rows.push(row);
        self.ge_rhs.push(-rhs);
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        let rows_ok = self.eq_rows.iter().chain(&self.ge_rows).all(|r| r.len() == n);
        if !rows_ok
            || self.eq_rows.len() != self.eq_rhs.len()
            || self.ge_rows.len() != self.ge_rhs.len()
            || self.lower.len() != n
        {
            return Err(Error::invalid("inconsistent LP dimensions"));
        }
        let finite = self
            .objective
            .iter()
            .chain(self.eq_rows.iter().flatten())
            .chain(self.ge_rows.iter().flatten())
            .chain(&self.eq_rhs)
            .chain(&self.ge_rhs)
            .chain(&self.lower)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite LP coefficient"));
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    /// Largest scaled residual `violation / (1 + ||row||)` over all
    /// constraints, and the most negative bound slack.
    pub fn residuals(&self, x: &[f64]) -> (f64, f64) {
        let dot = |row: &[f64]| row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>();
        let norm = |row: &[f64]| row.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut worst = 0.0_f64;
        for (row, &b) in self.eq_rows.iter().zip(&self.eq_rhs) {
            worst = worst.max((dot(row) - b).abs() / (1.0 + norm(row)));
        }
        for (row, &h) in self.ge_rows.iter().zip(&self.ge_rhs) {
            worst = worst.max((h - dot(row)).max(0.0) / (1.0 + norm(row)));
        }
        let bound = x
            .iter()
            .zip(&self.lower)
            .map(|(x, l)| x - l)
            .fold(f64::INFINITY, f64::min);
        (worst, bound)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Empty unless `status` is `Optimal`.
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `(rows + 1) x (cols + 1)`, row-major; last row is the reduced-cost
    /// row, last column the right-hand side.
    data: Vec<f64>,
    basis: Vec<usize>,
    first_artificial: usize,
    iterations: usize,
    max_iterations: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn width(&self) -> usize {
        self.cols + 1
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width() + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.cols)
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width();
        let inv = 1.0 / self.data[r * w + c];
        for v in &mut self.data[r * w..(r + 1) * w] {
            *v *= inv;
        }
        self.data[r * w + c] = 1.0;
        let (before, rest) = self.data.split_at_mut(r * w);
        let (pivot_row, after) = rest.split_at_mut(w);
        for row in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let factor = row[c];
            if factor != 0.0 {
                for (v, p) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= factor * p;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
        self.iterations += 1;
    }

    /// Dantzig pricing with ties in the ratio test going to the largest
    /// pivot. After `DEGENERATE_LIMIT` consecutive degenerate pivots the
    /// phase switches to Bland's rule (lowest-index improving column, lowest
    /// basic index among tied rows) for the rest of the phase.
    fn run(&mut self, allowed_cols: usize) -> Result<Outcome> {
        let obj = self.rows;
        let mut bland = false;
        let mut degenerate = 0;
        loop {
            if self.iterations > self.max_iterations {
                return Err(Error::SolverFailure(format!(
                    "iteration limit {} reached ({} rows, {} columns)",
                    self.max_iterations, self.rows, self.cols
                )));
            }
            let improving = (0..allowed_cols).filter(|&j| self.at(obj, j) < -REDUCED_COST_TOL);
            let enter = if bland {
                improving.into_iter().next()
            } else {
                improving.min_by(|&a, &b| self.at(obj, a).total_cmp(&self.at(obj, b)))
            };
            let Some(enter) = enter else {
                return Ok(Outcome::Optimal);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, enter);
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.rhs(i).max(0.0) / a;
                let better = match leave {
                    None => true,
                    Some((r, best)) => {
                        let tie = (ratio - best).abs() <= 1e-12 * (1.0 + best);
                        if !tie {
                            ratio < best
                        } else if bland {
                            self.basis[i] < self.basis[r]
                        } else {
                            a > self.at(r, enter)
                        }
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
            let Some((r, ratio)) = leave else {
                return Ok(Outcome::Unbounded);
            };
            if ratio == 0.0 {
                degenerate += 1;
                bland |= degenerate > DEGENERATE_LIMIT;
            } else {
                degenerate = 0;
            }
            self.pivot(r, enter);
        }
    }
}

/// Recomputes the basic solution from the original rows with partial
/// pivoting, removing the error accumulated over the pivots. `None` when the
/// basis matrix is numerically singular or the result leaves the bounds.
fn refine(lp: &StandardLp, row_ids: &[usize], basis: &[usize], cols: usize) -> Option<Vec<f64>> {
    let n = lp.num_vars();
    let n_eq = lp.eq_rows.len();
    let first_artificial = n + lp.ge_rows.len();
    let k = row_ids.len();
    let row_of = |i: usize| if i < n_eq { (&lp.eq_rows[i], lp.eq_rhs[i]) } else { (&lp.ge_rows[i - n_eq], lp.ge_rhs[i - n_eq]) };
    let mut a = vec![0.0; k * (k + 1)];
    for (r, &i) in row_ids.iter().enumerate() {
        let (row, rhs) = row_of(i);
        let line = &mut a[r * (k + 1)..(r + 1) * (k + 1)];
        for (c, &j) in basis.iter().enumerate() {
            line[c] = if j < n {
                row[j]
            } else if j < first_artificial {
                if i >= n_eq && j - n == i - n_eq { -1.0 } else { 0.0 }
            } else if j - first_artificial == i {
                1.0
            } else {
                0.0
            };
        }
        line[k] = rhs - row.iter().zip(&lp.lower).map(|(a, l)| a * l).sum::<f64>();
    }
    let w = k + 1;
    for col in 0..k {
        let pivot = (col..k).max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs()))?;
        if a[pivot * w + col].abs() < 1e-12 {
            return None;
        }
        for j in 0..w {
            a.swap(col * w + j, pivot * w + j);
        }
        for r in 0..k {
            if r != col {
                let factor = a[r * w + col] / a[col * w + col];
                if factor != 0.0 {
                    for j in col..w {
                        a[r * w + j] -= factor * a[col * w + j];
                    }
                }
            }
        }
    }
    let mut shifted = vec![0.0; cols];
    for (c, &j) in basis.iter().enumerate() {
        let v = a[c * w + k] / a[c * w + c];
        if j >= first_artificial {
            if !(v.abs() <= PHASE_ONE_TOL) {
                return None;
            }
            continue;
        }
        if !(v >= -NEGATIVITY_TOL) {
            return None;
        }
        shifted[j] = v.max(0.0);
    }
    Some(shifted)
}

/// Solves `lp`; see the module docs for the method.
pub fn solve(lp: &StandardLp) -> Result<LpSolution> {
    lp.validate()?;
    match solve_tableau(lp, true) {
        Ok(sol) if sol.status != LpStatus::Unbounded => Ok(sol),
        _ => solve_tableau(lp, false),
    }
}

/// Relaxation applied to `>=` row `k` when perturbing; distinct per row.
fn perturbation(k: usize, rhs: f64) -> f64 {
    let spread = 0.5 + 0.5 * ((k as f64 + 1.0) * 0.618_033_988_749_895).fract();
    PERTURBATION * (1.0 + rhs.abs()) * spread
}

fn solve_tableau(lp: &StandardLp, perturb: bool) -> Result<LpSolution> {
    let n = lp.num_vars();
    let n_ge = lp.ge_rows.len();
    let m = lp.eq_rows.len() + n_ge;
    let cols = n + n_ge + m;
    let first_artificial = n + n_ge;
    let width = cols + 1;
    let mut data = vec![0.0; (m + 1) * width];

    let shifted_rhs = |row: &[f64], rhs: f64| rhs - row.iter().zip(&lp.lower).map(|(a, l)| a * l).sum::<f64>();
    let rows = lp
        .eq_rows
        .iter()
        .zip(&lp.eq_rhs)
        .map(|(r, &b)| (r, b, None))
        .chain(lp.ge_rows.iter().zip(&lp.ge_rhs).enumerate().map(|(k, (r, &h))| (r, h, Some(k))));
    for (i, (row, rhs, surplus)) in rows.enumerate() {
        let mut rhs = shifted_rhs(row, rhs);
        if let (true, Some(k)) = (perturb, surplus) {
            rhs -= perturbation(k, rhs);
        }
        let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
        let line = &mut data[i * width..(i + 1) * width];
        for (dst, &a) in line.iter_mut().zip(row) {
            *dst = sign * a;
        }
        if let Some(k) = surplus {
            line[n + k] = -sign;
        }
        line[first_artificial + i] = 1.0;
        line[cols] = sign * rhs;
    }
    // Phase one reduced costs: minimize the artificial sum.
    for i in 0..m {
        for j in 0..first_artificial {
            data[m * width + j] -= data[i * width + j];
        }
        data[m * width + cols] -= data[i * width + cols];
    }

    let mut tab = Tableau {
        rows: m,
        cols,
        data,
        basis: (first_artificial..cols).collect(),
        first_artificial,
        iterations: 0,
        max_iterations: 50_000 + 200 * (m + cols),
    };
    tab.run(first_artificial)?;
    let infeasibility = -tab.rhs(m);
    let rhs_scale = 1.0 + (0..m).map(|i| tab.rhs(i).abs()).fold(0.0, f64::max);
    if infeasibility > PHASE_ONE_TOL * rhs_scale {
        debug!("phase one ended with infeasibility {infeasibility}");
        return Ok(LpSolution {
            status: LpStatus::Infeasible,
            x: Vec::new(),
            objective: f64::NAN,
            iterations: tab.iterations,
        });
    }

    // Drive artificials out of the basis; rows where that is impossible are
    // redundant and get dropped.
    let mut keep = vec![true; m];
    for i in 0..m {
        if tab.basis[i] >= tab.first_artificial {
            let candidate = (0..tab.first_artificial)
                .filter(|&j| tab.at(i, j).abs() > PIVOT_TOL)
                .max_by(|&a, &b| tab.at(i, a).abs().total_cmp(&tab.at(i, b).abs()));
            match candidate {
                Some(j) => tab.pivot(i, j),
                None => keep[i] = false,
            }
        }
    }
    let row_ids: Vec<usize> = (0..m).filter(|&i| keep[i]).collect();
    if keep.iter().any(|k| !k) {
        let mut data = Vec::with_capacity(tab.data.len());
        let mut basis = Vec::new();
        for i in 0..m {
            if keep[i] {
                data.extend_from_slice(&tab.data[i * width..(i + 1) * width]);
                basis.push(tab.basis[i]);
            }
        }
        data.extend_from_slice(&tab.data[m * width..]);
        tab.rows = basis.len();
        tab.data = data;
        tab.basis = basis;
    }

    // Phase two reduced costs.
    let sign = match lp.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let cost = |j: usize| if j < n { sign * lp.objective[j] } else { 0.0 };
    let m2 = tab.rows;
    let obj_row = m2 * width;
    for j in 0..width {
        tab.data[obj_row + j] = if j < cols { cost(j) } else { 0.0 };
    }
    for i in 0..m2 {
        let cb = cost(tab.basis[i]);
        if cb != 0.0 {
            for j in 0..width {
                tab.data[obj_row + j] -= cb * tab.data[i * width + j];
            }
        }
    }
    let outcome = tab.run(tab.first_artificial)?;
    if let Outcome::Unbounded = outcome {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: Vec::new(),
            objective: f64::NAN,
            iterations: tab.iterations,
        });
    }

    let shifted = match refine(lp, &row_ids, &tab.basis, cols) {
        Some(shifted) => shifted,
        None if perturb => {
            return Err(Error::SolverFailure(
                "optimal basis of the perturbed program is infeasible".into(),
            ))
        }
        None => {
            let mut shifted = vec![0.0; cols];
            for i in 0..m2 {
                shifted[tab.basis[i]] = tab.rhs(i);
            }
            shifted
        }
    };
    let mut x = Vec::with_capacity(n);
    for j in 0..n {
        let v = shifted[j];
        if v < -NEGATIVITY_TOL {
            return Err(Error::SolverFailure(format!(
                "variable {j} ended at {v} below its bound after {} pivots",
                tab.iterations
            )));
        }
        x.push(v.max(0.0) + lp.lower[j]);
    }
    let (residual, _) = lp.residuals(&x);
    if residual > RESIDUAL_TOL {
        return Err(Error::SolverFailure(format!(
            "constraint residual {residual:.3e} exceeds tolerance after {} pivots ({} rows, {} columns)",
            tab.iterations, m, n
        )));
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        objective: lp.objective_value(&x),
        x,
        iterations: tab.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bounded_single_variable() {
        let mut lp = StandardLp::new(Sense::Maximize, vec![1.0]);
        lp.add_le(&[(0, 1.0)], 1.0);
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut lp = StandardLp::new(Sense::Maximize, vec![1.0]);
        lp.add_ge(&[(0, 1.0)], 2.0);
        lp.add_le(&[(0, 1.0)], 1.0);
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_ray_detected() {
        let mut lp = StandardLp::new(Sense::Maximize, vec![1.0, 1.0]);
        lp.add_ge(&[(0, 1.0), (1, -1.0)], 0.0);
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn no_variables_with_unsatisfiable_row() {
        let mut lp = StandardLp::new(Sense::Maximize, vec![]);
        lp.add_eq(&[], 1.0);
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Infeasible);
        let empty = StandardLp::new(Sense::Minimize, vec![]);
        assert_eq!(solve(&empty).unwrap().status, LpStatus::Optimal);
    }

    #[test]
    fn redundant_equalities_are_dropped() {
        // x + y = 1 twice, min x - y.
        let mut lp = StandardLp::new(Sense::Minimize, vec![1.0, -1.0]);
        lp.add_eq(&[(0, 1.0), (1, 1.0)], 1.0);
        lp.add_eq(&[(0, 2.0), (1, 2.0)], 2.0);
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn lower_bounds_shift() {
        let mut lp = StandardLp::new(Sense::Minimize, vec![1.0, 2.0]);
        lp.lower = vec![1.5, -1.0];
        lp.add_ge(&[(0, 1.0), (1, 1.0)], 3.0);
        let sol = solve(&lp).unwrap();
        assert_abs_diff_eq!(sol.objective, 4.0 - 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_cycling_example_terminates() {
        // Beale's classic cycling instance under Dantzig's rule.
        let mut lp = StandardLp::new(Sense::Minimize, vec![-0.75, 150.0, -0.02, 6.0]);
        lp.add_le(&[(0, 0.25), (1, -60.0), (2, -0.04), (3, 9.0)], 0.0);
        lp.add_le(&[(0, 0.5), (1, -90.0), (2, -0.02), (3, 3.0)], 0.0);
        lp.add_le(&[(2, 1.0)], 1.0);
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, -0.05, epsilon = 1e-10);
    }
}
