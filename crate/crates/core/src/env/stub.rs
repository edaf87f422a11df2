//! Cheap synthetic environment for exercising collection and scheduling logic.

use rand::Rng;

use super::{DoneReason, EnvError, Environment, StepResult};
use crate::rng::{self, purpose, StreamRng};

/// One-dimensional target-tracking task.
///
/// The observation is `[progress, target]` with a fresh random target every
/// step; the reward is `-(action - target)^2`. Episodes time out after
/// `episode_length` steps, or end as terminal after `terminal_at` steps when set.
pub struct StubEnv {
    episode_length: usize,
    terminal_at: Option<usize>,
    rng: StreamRng,
    target: f64,
    steps: usize,
    done: bool,
}

impl StubEnv {
    pub fn new(episode_length: usize, seed: u64) -> Self {
        Self {
            episode_length,
            terminal_at: None,
            rng: rng::stream(seed, &[purpose::ENV]),
            target: 0.0,
            steps: 0,
            done: true,
        }
    }

    pub fn with_terminal_at(mut self, step: usize) -> Self {
        self.terminal_at = Some(step);
        self
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.steps as f64 / self.episode_length as f64, self.target]
    }
}

impl Environment for StubEnv {
    fn observation_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn episode_length(&self) -> usize {
        self.episode_length
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = rng::stream(seed, &[purpose::ENV]);
    }

    fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        self.steps = 0;
        self.done = false;
        self.target = self.rng.random_range(-0.5..0.5);
        Ok(self.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        if action.len() != 1 {
            return Err(EnvError::ActionDim { expected: 1, got: action.len() });
        }
        let reward = -(action[0] - self.target).powi(2);
        self.steps += 1;
        self.target = self.rng.random_range(-0.5..0.5);
        let done_reason = if self.terminal_at.is_some_and(|k| self.steps >= k) {
            DoneReason::Terminal
        } else if self.steps >= self.episode_length {
            DoneReason::TimeOut
        } else {
            DoneReason::Running
        };
        self.done = done_reason.is_done();
        Ok(StepResult { observation: self.observation(), reward, done_reason })
    }
}
