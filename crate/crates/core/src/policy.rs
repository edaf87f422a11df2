//! Diagonal-Gaussian policy, PPO clipped-surrogate actor loss, critic
//! regression and the per-update optimization loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::{clip_gradients_global, AdamState, Network, NetworkSpec, NnError, Tape};
use crate::rng::{self, purpose};
use crate::rollout::{RolloutBuffer, RunningNormalizer};

/// Lower bound applied to the sigmoid standard-deviation head.
pub const STD_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid PPO configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite probability ratio {ratio} at sample {sample}")]
    NonFiniteRatio { sample: usize, ratio: f64 },
    #[error("on-policy violation: {count} of {total} transitions were not collected by version {current}")]
    OnPolicyViolation { count: usize, total: usize, current: u64 },
    #[error("buffer is empty or has no assembled targets")]
    NotAssembled,
}

/// Monotone counter of completed agent updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PolicyVersion(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Whether each std component sits on the floor (no gradient flows).
    floored: Vec<bool>,
}

impl PolicyOutput {
    pub fn new(mean: Vec<f64>, raw_std: Vec<f64>) -> Self {
        let floored = raw_std.iter().map(|&s| s < STD_FLOOR).collect();
        let std = raw_std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
        Self { mean, std, floored }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    /// Pre-clip Gaussian sample; the log-probability refers to this value.
    pub raw: Vec<f64>,
    /// Sample clipped to `[-1, 1]`, as sent to the environment.
    pub clipped: Vec<f64>,
    pub log_prob: f64,
}

pub fn sample_action<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> SampledAction {
    let raw: Vec<f64> =
        out.mean.iter().zip(&out.std).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
    let clipped = raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    let log_prob = log_prob(out, &raw);
    SampledAction { raw, clipped, log_prob }
}

pub fn log_prob(out: &PolicyOutput, action: &[f64]) -> f64 {
    out.mean
        .iter()
        .zip(&out.std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Log-density and its derivatives with respect to mean and std.
pub fn log_prob_grads(out: &PolicyOutput, action: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(out.dim());
    let mut d_std = Vec::with_capacity(out.dim());
    for ((m, s), a) in out.mean.iter().zip(&out.std).zip(action) {
        let diff = a - m;
        d_mean.push(diff / (s * s));
        d_std.push(-1.0 / s + diff * diff / (s * s * s));
    }
    (log_prob(out, action), d_mean, d_std)
}

pub fn entropy(out: &PolicyOutput) -> f64 {
    out.std.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            entropy_coef: 0.01,
            gamma: 0.99,
            gae_lambda: 0.99,
            epochs: 4,
            minibatch_size: 256,
            actor_lr: 5e-4,
            critic_lr: 2e-3,
            grad_clip: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatch_size == 0 {
            return bad("epochs and minibatch_size must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.grad_clip > 0.0) {
            return bad("learning rates and grad_clip must be positive");
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be non-negative");
        }
        Ok(())
    }
}

/// One actor-loss sample.
#[derive(Debug, Clone, Copy)]
pub struct ActorSample<'a> {
    pub observation: &'a [f64],
    pub raw_action: &'a [f64],
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorLoss {
    pub loss: f64,
    pub mean_entropy: f64,
    /// Fraction of samples whose surrogate was clipped.
    pub clip_fraction: f64,
}

fn policy_from_tape(actor: &Network, tape: &Tape) -> PolicyOutput {
    PolicyOutput::new(tape.head(actor, 0).to_vec(), tape.head(actor, 1).to_vec())
}

/// `-mean(min(ratio * A, g(eps, A))) - beta * mean(entropy)` and its gradient
/// with respect to the actor parameters.
pub fn ppo_actor_loss(
    actor: &Network,
    samples: &[ActorSample<'_>],
    config: &PpoConfig,
) -> Result<(ActorLoss, Vec<f64>), PolicyError> {
    let mut grads = vec![0.0; actor.param_count()];
    let mut tape = Tape::default();
    let n = samples.len() as f64;
    let (mut surrogate, mut ent, mut clipped) = (0.0, 0.0, 0usize);
    for (i, s) in samples.iter().enumerate() {
        actor.forward_into(s.observation, &mut tape)?;
        let out = policy_from_tape(actor, &tape);
        let (lp, d_mean, d_std) = log_prob_grads(&out, s.raw_action);
        let ratio = (lp - s.old_log_prob).exp();
        if !ratio.is_finite() {
            return Err(PolicyError::NonFiniteRatio { sample: i, ratio });
        }
        let a = s.advantage;
        let bound = if a >= 0.0 { (1.0 + config.clip_eps) * a } else { (1.0 - config.clip_eps) * a };
        let unclipped = ratio * a;
        // d(surrogate)/d(log_prob); zero once the clipped branch is active
        let d_lp = if unclipped < bound {
            surrogate += unclipped;
            unclipped
        } else {
            surrogate += bound;
            if unclipped > bound {
                clipped += 1;
            }
            0.0
        };
        ent += entropy(&out);
        let g_mean: Vec<f64> = d_mean.iter().map(|d| -d_lp * d / n).collect();
        let g_std: Vec<f64> = d_std
            .iter()
            .zip(&out.std)
            .zip(&out.floored)
            .map(|((d, s), &f)| if f { 0.0 } else { (-d_lp * d - config.entropy_coef / s) / n })
            .collect();
        actor.backward_into(&tape, &[&g_mean, &g_std], &mut grads)?;
    }
    let mean_entropy = ent / n;
    let loss = -surrogate / n - config.entropy_coef * mean_entropy;
    Ok((ActorLoss { loss, mean_entropy, clip_fraction: clipped as f64 / n }, grads))
}

/// Mean squared error between the critic and `targets`, with its gradient.
pub fn critic_loss(critic: &Network, observations: &[&[f64]], targets: &[f64]) -> Result<(f64, Vec<f64>), PolicyError> {
    let mut grads = vec![0.0; critic.param_count()];
    let mut tape = Tape::default();
    let n = observations.len() as f64;
    let mut loss = 0.0;
    for (obs, y) in observations.iter().zip(targets) {
        critic.forward_into(obs, &mut tape)?;
        let err = tape.head(critic, 0)[0] - y;
        loss += err * err;
        critic.backward_into(&tape, &[&[2.0 * err / n]], &mut grads)?;
    }
    Ok((loss / n, grads))
}

/// Read-only copy of everything needed to act: handed to collection workers.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub actor: Network,
    pub critic: Network,
    pub normalizer: RunningNormalizer,
    pub version: PolicyVersion,
}

impl PolicySnapshot {
    pub fn policy(&self, normalized_obs: &[f64]) -> Result<PolicyOutput, PolicyError> {
        let (heads, _) = self.actor.forward(normalized_obs)?;
        let mut it = heads.into_iter();
        Ok(PolicyOutput::new(it.next().expect("mean head"), it.next().expect("std head")))
    }

    pub fn value(&self, normalized_obs: &[f64]) -> Result<f64, PolicyError> {
        Ok(self.critic.forward(normalized_obs)?.0[0][0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean critic estimate stored with the buffer's transitions.
    pub mean_value: f64,
    pub clip_fraction: f64,
}

/// Actor, critic, their optimizers and the observation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub actor: Network,
    pub critic: Network,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub normalizer: RunningNormalizer,
    pub version: PolicyVersion,
    pub config: PpoConfig,
    pub seed: u64,
}

impl Agent {
    pub fn new(obs_dim: usize, action_dim: usize, config: PpoConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut init = rng::stream(seed, &[purpose::INIT]);
        let actor = Network::orthogonal(NetworkSpec::actor(obs_dim, action_dim), &mut init)?;
        let critic = Network::orthogonal(NetworkSpec::critic(obs_dim), &mut init)?;
        Ok(Self {
            actor_adam: AdamState::new(actor.param_count(), config.actor_lr),
            critic_adam: AdamState::new(critic.param_count(), config.critic_lr),
            actor,
            critic,
            normalizer: RunningNormalizer::new(obs_dim),
            version: PolicyVersion(0),
            config,
            seed,
        })
    }

    pub fn observation_dim(&self) -> usize {
        self.actor.spec().input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.actor.spec().branches[0].out_dim
    }

    pub fn snapshot(&self) -> Arc<PolicySnapshot> {
        Arc::new(PolicySnapshot {
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            normalizer: self.normalizer.clone(),
            version: self.version,
        })
    }

    /// Runs the PPO epochs on an assembled buffer and bumps the version.
    /// Transitions from other versions are refused unless `allow_off_policy`.
    pub fn update(&mut self, buffer: &RolloutBuffer, allow_off_policy: bool) -> Result<UpdateMetrics, PolicyError> {
        if !buffer.is_assembled() {
            return Err(PolicyError::NotAssembled);
        }
        let transitions: Vec<_> = buffer.transitions().collect();
        let stale = transitions.iter().filter(|t| t.policy_version != self.version).count();
        if stale > 0 && !allow_off_policy {
            return Err(PolicyError::OnPolicyViolation { count: stale, total: transitions.len(), current: self.version.0 });
        }
        let advantages = buffer.advantages();
        let targets = buffer.targets();
        let cfg = self.config.clone();
        let mut order: Vec<usize> = (0..transitions.len()).collect();
        let mut shuffle_rng = rng::stream(self.seed, &[purpose::MINIBATCH, self.version.0]);
        let mut metrics = UpdateMetrics {
            mean_value: transitions.iter().map(|t| t.value).sum::<f64>() / transitions.len() as f64,
            ..UpdateMetrics::default()
        };
        let mut batches = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let samples: Vec<ActorSample<'_>> = chunk
                    .iter()
                    .map(|&i| ActorSample {
                        observation: &transitions[i].observation,
                        raw_action: &transitions[i].raw_action,
                        old_log_prob: transitions[i].log_prob,
                        advantage: advantages[i],
                    })
                    .collect();
                let (actor_loss, mut g_actor) = ppo_actor_loss(&self.actor, &samples, &cfg)?;
                clip_gradients_global(&mut g_actor, cfg.grad_clip);
                self.actor_adam.step(self.actor.params_mut(), &g_actor)?;

                let obs: Vec<&[f64]> = chunk.iter().map(|&i| transitions[i].observation.as_slice()).collect();
                let y: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                let (value_loss, mut g_critic) = critic_loss(&self.critic, &obs, &y)?;
                clip_gradients_global(&mut g_critic, cfg.grad_clip);
                self.critic_adam.step(self.critic.params_mut(), &g_critic)?;

                metrics.policy_loss += actor_loss.loss;
                metrics.entropy += actor_loss.mean_entropy;
                metrics.clip_fraction += actor_loss.clip_fraction;
                metrics.value_loss += value_loss;
                batches += 1;
            }
        }
        let b = batches as f64;
        metrics.policy_loss /= b;
        metrics.entropy /= b;
        metrics.clip_fraction /= b;
        metrics.value_loss /= b;
        self.version.0 += 1;
        Ok(metrics)
    }
}
