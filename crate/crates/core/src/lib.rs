//! Episode-wise safe exploration for linear constrained MDPs.
//!
//! The crate contains exact CMDP evaluation ([`cmdp`]), the ridge-regression
//! estimator shared by the learning agents ([`estimator`]), the
//! optimistic-pessimistic softmax agent ([`opse`]), its bandit counterpart
//! ([`bandit`]), comparison agents ([`baselines`]), a dense LP solver with the
//! occupancy-measure programs ([`lpsolve`]), environment generators
//! ([`envs`]) and the experiment harness ([`harness`]).

pub mod agent;
pub mod bandit;
pub mod baselines;
pub mod cmdp;
pub mod envs;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod lpsolve;
pub mod opse;

pub use agent::{Agent, Deployment, KnownModel};
pub use cmdp::{ExplicitPolicy, LinearCmdp, SafePolicyOracle, Transition};
pub use error::{Error, Result};
pub use estimator::EstimatorState;
pub use opse::{OpseAgent, OpseConfig};
