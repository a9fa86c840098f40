//! Dense simplex solver and the occupancy-measure programs built on it.

mod dope;
mod occupancy;
mod simplex;

pub use dope::{dope_lp, dope_policy, Column, DopeProblem, DopeSolution, TransitionCounts};
pub use occupancy::optimal_safe_policy;
pub use simplex::{solve, LpSolution, LpStatus, Sense, StandardLp};
