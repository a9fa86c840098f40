use ndarray::Array3;

use crate::cmdp::{ExplicitPolicy, LinearCmdp, Transition};
use crate::error::Result;

/// The part of a CMDP an agent is allowed to see: features, the known reward
/// and utility tables, the initial state and the threshold. Transitions are
/// only reachable through sampled trajectories.
#[derive(Debug, Clone)]
pub struct KnownModel {
    pub horizon: usize,
    pub features: Array3<f64>,
    pub reward: Array3<f64>,
    pub utility: Array3<f64>,
    pub initial_state: usize,
    pub threshold: f64,
}

impl KnownModel {
    pub fn num_states(&self) -> usize {
        self.features.dim().0
    }

    pub fn num_actions(&self) -> usize {
        self.features.dim().1
    }

    pub fn dim(&self) -> usize {
        self.features.dim().2
    }
}

impl From<&LinearCmdp> for KnownModel {
    fn from(cmdp: &LinearCmdp) -> Self {
        Self {
            horizon: cmdp.horizon(),
            features: cmdp.features().to_owned(),
            reward: cmdp.reward().to_owned(),
            utility: cmdp.utility().to_owned(),
            initial_state: cmdp.initial_state(),
            threshold: cmdp.threshold(),
        }
    }
}

/// What an agent plays in one episode.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub policy: ExplicitPolicy,
    /// Multiplier that induced the policy; 0 when not applicable.
    pub lambda: f64,
    /// Whether this is a safe-policy deployment.
    pub safe: bool,
    /// The agent's own estimate of the deployed utility at `s1`, if it has one.
    pub estimated_utility: Option<f64>,
}

/// An episodic CMDP learner.
pub trait Agent {
    fn name(&self) -> &'static str;

    fn act(&mut self) -> Result<Deployment>;

    fn observe(&mut self, trajectory: &[Transition]) -> Result<()>;
}
