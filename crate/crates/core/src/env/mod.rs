//! Episode-level control interface shared by all environments.

mod pendulum;
mod shkadov;
pub mod stub;

pub use pendulum::{Pendulum, PendulumConfig, PendulumState};
pub use shkadov::{
    compute_reward, generate_initial_states, interpolate_action, jet_forcing, load_initial_states, observe,
    ActionSchedule, JetLayout, ShkadovEnv, ShkadovEnvConfig,
};

use thiserror::Error;

use crate::solver::SolverError;

/// Why (or whether) an episode ended after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DoneReason {
    Running,
    /// The arbitrary step cap of a continuing task was reached.
    TimeOut,
    /// A genuine absorbing failure; never bootstrapped.
    Terminal,
}

impl DoneReason {
    pub fn is_done(self) -> bool {
        !matches!(self, DoneReason::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DoneReason::Running => "running",
            DoneReason::TimeOut => "timeout",
            DoneReason::Terminal => "terminal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done_reason: DoneReason,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("step called on a finished episode; call reset first")]
    EpisodeFinished,
    #[error("action has {got} components, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A resettable episodic environment with a continuous action space in `[-1, 1]^d`.
///
/// Environments own their random stream; [`Environment::reseed`] replaces it so
/// that callers can key randomness by episode or environment id.
pub trait Environment: Send {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Number of actions after which an episode times out.
    fn episode_length(&self) -> usize;
    fn reseed(&mut self, seed: u64);
    fn reset(&mut self) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn observation_dim(&self) -> usize {
        (**self).observation_dim()
    }
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn episode_length(&self) -> usize {
        (**self).episode_length()
    }
    fn reseed(&mut self, seed: u64) {
        (**self).reseed(seed)
    }
    fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        (**self).reset()
    }
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        (**self).step(action)
    }
}
