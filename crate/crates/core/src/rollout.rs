//! Transition storage, running observation statistics and return/advantage
//! assembly with optional end-of-episode bootstrapping.
//!
//! A buffer is a list of groups. Each group is a contiguous run of one
//! episode on one environment and is closed by a tail that says how the
//! return recursion is seeded after its last transition.

use std::fmt::Write as _;

use thiserror::Error;

use crate::env::DoneReason;
use crate::policy::PolicyVersion;

#[derive(Debug, Error, PartialEq)]
pub enum RolloutError {
    #[error("rollout contract violation: {0}")]
    Contract(String),
    #[error("on-policy violation on env {env_id}: group holds version {expected}, transition has {got}")]
    OnPolicyViolation { env_id: usize, expected: u64, got: u64 },
    #[error("group {group} needs a bootstrap value but none was stored")]
    MissingTailValue { group: usize },
    #[error("group {group} has no tail; close it before assembly")]
    IncompleteGroup { group: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Normalized observation the action was chosen from.
    pub observation: Vec<f64>,
    /// Pre-clip Gaussian sample.
    pub raw_action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done_reason: DoneReason,
    pub policy_version: PolicyVersion,
    pub env_id: usize,
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TailKind {
    TrueTerminal,
    TimeOutBootstrap,
    PartialBootstrap,
}

impl TailKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TailKind::TrueTerminal => "terminal",
            TailKind::TimeOutBootstrap => "timeout_bootstrap",
            TailKind::PartialBootstrap => "partial_bootstrap",
        }
    }

    /// Bootstrap multiplier applied to the tail value.
    pub fn bootstrap_factor(self, eoe_bootstrap: bool) -> f64 {
        match self {
            TailKind::TrueTerminal => 0.0,
            TailKind::PartialBootstrap => 1.0,
            TailKind::TimeOutBootstrap => {
                if eoe_bootstrap {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tail {
    pub kind: TailKind,
    /// Critic estimate at the state following the last transition.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub env_id: usize,
    pub transitions: Vec<Transition>,
    pub tail: Option<Tail>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    groups: Vec<Group>,
    len: usize,
    /// Reject mixed policy versions inside a group.
    strict: bool,
    targets: Vec<f64>,
    advantages: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(strict: bool) -> Self {
        Self { strict, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.groups.iter().flat_map(|g| g.transitions.iter())
    }

    fn open_group(&self, env_id: usize) -> Option<usize> {
        self.groups.iter().rposition(|g| g.env_id == env_id && g.tail.is_none())
    }

    fn invalidate(&mut self) {
        self.targets.clear();
        self.advantages.clear();
    }

    pub fn append_transition(&mut self, t: Transition) -> Result<(), RolloutError> {
        if !(t.reward.is_finite() && t.value.is_finite() && t.log_prob.is_finite())
            || t.observation.iter().chain(&t.raw_action).any(|v| !v.is_finite())
        {
            return Err(RolloutError::Contract(format!(
                "non-finite transition on env {} step {}",
                t.env_id, t.step_index
            )));
        }
        match self.open_group(t.env_id) {
            Some(gi) => {
                let last = self.groups[gi].transitions.last().expect("open groups are never empty");
                if last.done_reason.is_done() {
                    return Err(RolloutError::Contract(format!(
                        "env {} episode ended at step {}; close the group before appending",
                        t.env_id, last.step_index
                    )));
                }
                if t.step_index != last.step_index + 1 {
                    return Err(RolloutError::Contract(format!(
                        "env {} step {} does not follow step {}",
                        t.env_id, t.step_index, last.step_index
                    )));
                }
                if self.strict && t.policy_version != last.policy_version {
                    return Err(RolloutError::OnPolicyViolation {
                        env_id: t.env_id,
                        expected: last.policy_version.0,
                        got: t.policy_version.0,
                    });
                }
                self.groups[gi].transitions.push(t);
            }
            None => self.groups.push(Group { env_id: t.env_id, transitions: vec![t], tail: None }),
        }
        self.len += 1;
        self.invalidate();
        Ok(())
    }

    /// Closes the open group of `env_id` with the given tail.
    pub fn close_group(&mut self, env_id: usize, kind: TailKind, value: Option<f64>) -> Result<(), RolloutError> {
        let gi = self
            .open_group(env_id)
            .ok_or_else(|| RolloutError::Contract(format!("env {env_id} has no open group to close")))?;
        let last = self.groups[gi].transitions.last().expect("open groups are never empty").done_reason;
        let consistent = match kind {
            TailKind::TrueTerminal => last == DoneReason::Terminal,
            TailKind::TimeOutBootstrap => last == DoneReason::TimeOut,
            TailKind::PartialBootstrap => last == DoneReason::Running,
        };
        if !consistent {
            return Err(RolloutError::Contract(format!(
                "env {env_id}: tail {} does not match last done reason {}",
                kind.as_str(),
                last.as_str()
            )));
        }
        if value.is_some_and(|v| !v.is_finite()) {
            return Err(RolloutError::Contract(format!("env {env_id}: non-finite tail value")));
        }
        self.groups[gi].tail = Some(Tail { kind, value });
        self.invalidate();
        Ok(())
    }

    /// Appends every group of `other`, re-validating each transition.
    pub fn extend_from(&mut self, other: RolloutBuffer) -> Result<(), RolloutError> {
        for group in other.groups {
            let env_id = group.env_id;
            if self.open_group(env_id).is_some() {
                return Err(RolloutError::Contract(format!("env {env_id} already has an open group")));
            }
            for t in group.transitions {
                self.append_transition(t)?;
            }
            if let Some(tail) = group.tail {
                self.close_group(env_id, tail.kind, tail.value)?;
            }
        }
        Ok(())
    }

    fn tail_seed(&self, gi: usize, eoe_bootstrap: bool) -> Result<f64, RolloutError> {
        let tail = self.groups[gi].tail.ok_or(RolloutError::IncompleteGroup { group: gi })?;
        let b = tail.kind.bootstrap_factor(eoe_bootstrap);
        if b == 0.0 {
            return Ok(0.0);
        }
        tail.value.map(|v| b * v).ok_or(RolloutError::MissingTailValue { group: gi })
    }

    /// Discounted returns with a bootstrapped or zero tail, in buffer order.
    pub fn assemble_targets(&self, gamma: f64, eoe_bootstrap: bool) -> Result<Vec<f64>, RolloutError> {
        let mut out = Vec::with_capacity(self.len);
        for (gi, g) in self.groups.iter().enumerate() {
            let mut next = self.tail_seed(gi, eoe_bootstrap)?;
            let start = out.len();
            out.resize(start + g.transitions.len(), 0.0);
            for (k, t) in g.transitions.iter().enumerate().rev() {
                next = t.reward + gamma * next;
                out[start + k] = next;
            }
        }
        Ok(out)
    }

    /// Generalized advantage estimates (not normalized) and value targets.
    pub fn gae_advantages(
        &self,
        gamma: f64,
        lambda: f64,
        eoe_bootstrap: bool,
    ) -> Result<(Vec<f64>, Vec<f64>), RolloutError> {
        let mut adv = Vec::with_capacity(self.len);
        let mut targets = Vec::with_capacity(self.len);
        for (gi, g) in self.groups.iter().enumerate() {
            let mut next_value = self.tail_seed(gi, eoe_bootstrap)?;
            let mut next_adv = 0.0;
            let start = adv.len();
            adv.resize(start + g.transitions.len(), 0.0);
            targets.resize(start + g.transitions.len(), 0.0);
            for (k, t) in g.transitions.iter().enumerate().rev() {
                let delta = t.reward + gamma * next_value - t.value;
                next_adv = delta + gamma * lambda * next_adv;
                next_value = t.value;
                adv[start + k] = next_adv;
                targets[start + k] = next_adv + t.value;
            }
        }
        Ok((adv, targets))
    }

    /// Computes GAE, stores the value targets and the per-rollout normalized
    /// advantages.
    pub fn assemble(&mut self, gamma: f64, lambda: f64, eoe_bootstrap: bool) -> Result<(), RolloutError> {
        let (mut adv, targets) = self.gae_advantages(gamma, lambda, eoe_bootstrap)?;
        normalize_advantages(&mut adv);
        self.advantages = adv;
        self.targets = targets;
        Ok(())
    }

    pub fn is_assembled(&self) -> bool {
        !self.is_empty() && self.targets.len() == self.len
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    /// One transition per line, in buffer order.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        for g in &self.groups {
            for (k, t) in g.transitions.iter().enumerate() {
                let tail = match (k + 1 == g.transitions.len(), g.tail) {
                    (true, Some(Tail { kind, value: Some(v) })) => format!("{}:{v:e}", kind.as_str()),
                    (true, Some(Tail { kind, value: None })) => kind.as_str().to_string(),
                    _ => "-".to_string(),
                };
                writeln!(
                    out,
                    "env={} step={} version={} done={} reward={:e} value={:e} log_prob={:e} obs=[{}] action=[{}] tail={}",
                    t.env_id,
                    t.step_index,
                    t.policy_version.0,
                    t.done_reason.as_str(),
                    t.reward,
                    t.value,
                    t.log_prob,
                    list(&t.observation),
                    list(&t.raw_action),
                    tail
                )
                .expect("writing to a String cannot fail");
            }
        }
        out
    }
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
/// The deviation is floored at 1e-8 so constant inputs map to zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Per-component running mean and variance in mergeable form.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNormalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Population variance; 1 before any sample has been seen.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| (m / self.count as f64).max(0.0)).collect()
    }

    pub fn update(&mut self, obs: &[f64]) {
        assert_eq!(obs.len(), self.dim(), "observation dimension");
        self.count += 1;
        let n = self.count as f64;
        for i in 0..obs.len() {
            let delta = obs[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (obs[i] - self.mean[i]);
        }
    }

    /// Combines statistics of two disjoint sample sets.
    pub fn merge(&mut self, other: &RunningNormalizer) {
        assert_eq!(other.dim(), self.dim(), "normalizer dimension");
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// `(obs - mean) / sqrt(var + 1e-8)`, updating the statistics first when
    /// `update` is set. No clipping.
    pub fn normalize(&mut self, obs: &[f64], update: bool) -> Vec<f64> {
        if update {
            self.update(obs);
        }
        self.apply(obs)
    }

    /// Normalization with frozen statistics.
    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        let var = self.variance();
        obs.iter().zip(&self.mean).zip(var).map(|((o, m), v)| (o - m) / (v + 1e-8).sqrt()).collect()
    }
}
