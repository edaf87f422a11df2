//! Rigid-pendulum swing-up benchmark (angle 0 is upright).
//!
//! Observation is `[cos(theta), sin(theta), theta_dot]`, the reward is minus a
//! quadratic cost on angle, speed and torque, and every episode times out
//! after a fixed number of steps.

use std::f64::consts::PI;

use rand::Rng;

use super::{DoneReason, EnvError, Environment, StepResult};
use crate::rng::{self, purpose, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct PendulumConfig {
    pub max_speed: f64,
    pub max_torque: f64,
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub episode_length: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self { max_speed: 8.0, max_torque: 2.0, dt: 0.05, gravity: 10.0, mass: 1.0, length: 1.0, episode_length: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

fn normalize_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl PendulumState {
    pub fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Quadratic cost for applying `torque` (physical units) in this state.
    pub fn cost(&self, torque: f64) -> f64 {
        let th = normalize_angle(self.theta);
        th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * torque * torque
    }
}

pub struct Pendulum {
    config: PendulumConfig,
    state: PendulumState,
    rng: StreamRng,
    steps: usize,
    done: bool,
}

impl Pendulum {
    pub fn new(config: PendulumConfig, seed: u64) -> Self {
        Self {
            config,
            state: PendulumState { theta: PI, theta_dot: 0.0 },
            rng: rng::stream(seed, &[purpose::ENV]),
            steps: 0,
            done: true,
        }
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: PendulumState) -> Vec<f64> {
        self.state = state;
        self.steps = 0;
        self.done = false;
        self.state.observation()
    }

    /// Semi-implicit Euler update without the speed cap.
    fn integrate(config: &PendulumConfig, state: PendulumState, torque: f64) -> PendulumState {
        let (g, m, l, dt) = (config.gravity, config.mass, config.length, config.dt);
        let accel = 3.0 * g / (2.0 * l) * state.theta.sin() + 3.0 / (m * l * l) * torque;
        let theta_dot = state.theta_dot + accel * dt;
        PendulumState { theta: state.theta + theta_dot * dt, theta_dot }
    }

    /// Advances one step with a normalized torque in `[-1, 1]`.
    pub fn pendulum_step(&mut self, torque: f64) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let u = torque.clamp(-1.0, 1.0) * self.config.max_torque;
        let reward = -self.state.cost(u);
        let mut next = Self::integrate(&self.config, self.state, u);
        if next.theta_dot.abs() > self.config.max_speed {
            next.theta_dot = next.theta_dot.clamp(-self.config.max_speed, self.config.max_speed);
        }
        self.state = next;
        self.steps += 1;
        let done_reason =
            if self.steps >= self.config.episode_length { DoneReason::TimeOut } else { DoneReason::Running };
        self.done = done_reason.is_done();
        Ok(StepResult { observation: self.state.observation(), reward, done_reason })
    }
}

impl Environment for Pendulum {
    fn observation_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn episode_length(&self) -> usize {
        self.config.episode_length
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = rng::stream(seed, &[purpose::ENV]);
    }

    fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        let state = PendulumState {
            theta: self.rng.random_range(-PI..PI),
            theta_dot: self.rng.random_range(-1.0..1.0),
        };
        Ok(self.reset_to(state))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != 1 {
            return Err(EnvError::ActionDim { expected: 1, got: action.len() });
        }
        self.pendulum_step(action[0])
    }
}
