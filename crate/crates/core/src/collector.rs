//! Synchronous parallel transition collection.
//!
//! One worker thread owns each environment and talks to the trainer only
//! through channels: a parameter snapshot goes out at the start of a segment,
//! transition groups come back at its end, and nothing runs until the next
//! snapshot arrives. In `EoePt` mode every worker unrolls a fixed number of
//! steps per update and cut episodes are closed with a bootstrap value, so
//! each update buffer holds only current-version transitions. `Regular` and
//! `EoeOnly` collect whole episodes and slice them into updates of
//! `n_update` episodes, which goes off-policy once `n_env > n_update`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::env::{DoneReason, EnvError, Environment};
use crate::policy::{sample_action, Agent, PolicyError, PolicySnapshot, PolicyVersion, UpdateMetrics};
use crate::rng::{self, purpose, StreamRng};
use crate::rollout::{Group, RolloutBuffer, RolloutError, RunningNormalizer, TailKind, Transition};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("collector configuration error: {0}")]
    Config(String),
    #[error("worker {env_id} failed: {message}")]
    Worker { env_id: usize, message: String },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Callback(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectMode {
    /// Whole episodes, no bootstrapping at all.
    Regular,
    /// Whole episodes, time-outs bootstrapped.
    EoeOnly,
    /// Fixed-length segments, time-outs and cut segments bootstrapped.
    EoePt,
}

impl CollectMode {
    pub fn eoe_bootstrap(self) -> bool {
        !matches!(self, CollectMode::Regular)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CollectMode::Regular => "regular",
            CollectMode::EoeOnly => "eoe",
            CollectMode::EoePt => "eoe_pt",
        }
    }
}

impl fmt::Display for CollectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollectMode {
    type Err = CollectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(CollectMode::Regular),
            "eoe" => Ok(CollectMode::EoeOnly),
            "eoe_pt" => Ok(CollectMode::EoePt),
            other => Err(CollectError::Config(format!("unknown mode '{other}' (expected regular, eoe or eoe_pt)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentPlan {
    pub mode: CollectMode,
    pub n_env: usize,
    pub n_update: usize,
    pub episode_length: usize,
    /// Steps each worker unrolls per update (`EoePt` only).
    pub steps_per_env: Option<usize>,
    pub transitions_per_update: usize,
}

pub fn plan_segments(
    n_env: usize,
    n_update: usize,
    episode_length: usize,
    mode: CollectMode,
) -> Result<SegmentPlan, CollectError> {
    if n_env == 0 || n_update == 0 || episode_length == 0 {
        return Err(CollectError::Config("n_env, n_update and the episode length must be positive".into()));
    }
    let transitions_per_update = n_update * episode_length;
    let steps_per_env = match mode {
        CollectMode::EoePt => {
            if !transitions_per_update.is_multiple_of(n_env) {
                return Err(CollectError::Config(format!(
                    "eoe_pt needs n_env to divide n_update * T = {transitions_per_update}; {n_env} does not"
                )));
            }
            Some(transitions_per_update / n_env)
        }
        _ => None,
    };
    Ok(SegmentPlan { mode, n_env, n_update, episode_length, steps_per_env, transitions_per_update })
}

/// Summary of one finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub env_id: usize,
    pub length: usize,
    pub total_reward: f64,
    pub done_reason: DoneReason,
}

impl EpisodeRecord {
    /// Mean per-step reward, the score unit.
    pub fn score(&self) -> f64 {
        self.total_reward / self.length as f64
    }
}

/// Fraction of transitions not collected by the current policy version.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnPolicyReport {
    pub off_policy: usize,
    pub total: usize,
}

impl OnPolicyReport {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.off_policy as f64 / self.total as f64
        }
    }
}

pub fn verify_on_policy(buffer: &RolloutBuffer, current: PolicyVersion) -> OnPolicyReport {
    let total = buffer.len();
    let off_policy = buffer.transitions().filter(|t| t.policy_version != current).count();
    OnPolicyReport { off_policy, total }
}

pub type EnvFactory = Arc<dyn Fn(usize) -> Result<Box<dyn Environment>, EnvError> + Send + Sync>;

enum Command {
    Segment { snapshot: Arc<PolicySnapshot>, steps: usize },
    Episodes { snapshot: Arc<PolicySnapshot>, keys: Vec<u64> },
}

/// What a worker sends back at the end of a segment.
struct WorkerReport {
    env_id: usize,
    groups: Vec<Group>,
    /// Raw-observation statistics per group, aligned with `groups`.
    stats: Vec<RunningNormalizer>,
    episodes: Vec<EpisodeRecord>,
    env_time: Duration,
    busy_time: Duration,
}

struct ActiveEpisode {
    raw_obs: Vec<f64>,
    step_index: usize,
    total_reward: f64,
    policy_rng: StreamRng,
}

struct Worker {
    env_id: usize,
    env: Box<dyn Environment>,
    seed: u64,
    episode_counter: u64,
    active: Option<ActiveEpisode>,
    env_time: Duration,
}

impl Worker {
    fn start_episode(&mut self, env_seed: u64, policy_rng: StreamRng) -> Result<(), EnvError> {
        self.env.reseed(env_seed);
        let t = Instant::now();
        let raw_obs = self.env.reset()?;
        self.env_time += t.elapsed();
        self.active = Some(ActiveEpisode { raw_obs, step_index: 0, total_reward: 0.0, policy_rng });
        Ok(())
    }

    fn value_of(snapshot: &PolicySnapshot, raw_obs: &[f64]) -> Result<f64, PolicyError> {
        snapshot.value(&snapshot.normalizer.apply(raw_obs))
    }

    /// Takes one step of the active episode; closes the group when it ends.
    fn step(
        &mut self,
        snapshot: &PolicySnapshot,
        buffer: &mut RolloutBuffer,
        stats: &mut RunningNormalizer,
        episodes: &mut Vec<EpisodeRecord>,
    ) -> Result<(), String> {
        let ep = self.active.as_mut().expect("step needs an active episode");
        stats.update(&ep.raw_obs);
        let obs = snapshot.normalizer.apply(&ep.raw_obs);
        let out = snapshot.policy(&obs).map_err(|e| e.to_string())?;
        let action = sample_action(&out, &mut ep.policy_rng);
        let value = snapshot.value(&obs).map_err(|e| e.to_string())?;
        let t = Instant::now();
        let result = self.env.step(&action.clipped).map_err(|e| e.to_string())?;
        self.env_time += t.elapsed();
        buffer
            .append_transition(Transition {
                observation: obs,
                raw_action: action.raw,
                log_prob: action.log_prob,
                reward: result.reward,
                value,
                done_reason: result.done_reason,
                policy_version: snapshot.version,
                env_id: self.env_id,
                step_index: ep.step_index,
            })
            .map_err(|e| e.to_string())?;
        ep.step_index += 1;
        ep.total_reward += result.reward;
        ep.raw_obs = result.observation;
        match result.done_reason {
            DoneReason::Running => {}
            DoneReason::TimeOut => {
                let v = Self::value_of(snapshot, &ep.raw_obs).map_err(|e| e.to_string())?;
                buffer.close_group(self.env_id, TailKind::TimeOutBootstrap, Some(v)).map_err(|e| e.to_string())?;
            }
            DoneReason::Terminal => {
                buffer.close_group(self.env_id, TailKind::TrueTerminal, None).map_err(|e| e.to_string())?;
            }
        }
        if result.done_reason.is_done() {
            episodes.push(EpisodeRecord {
                env_id: self.env_id,
                length: ep.step_index,
                total_reward: ep.total_reward,
                done_reason: result.done_reason,
            });
            self.active = None;
        }
        Ok(())
    }

    fn run_segment(&mut self, snapshot: &PolicySnapshot, steps: usize) -> Result<WorkerReport, String> {
        let busy = Instant::now();
        self.env_time = Duration::ZERO;
        let mut buffer = RolloutBuffer::new(true);
        let mut stats = Vec::new();
        let mut episodes = Vec::new();
        let dim = self.env.observation_dim();
        for _ in 0..steps {
            if self.active.is_none() {
                let tags = [purpose::ENV, self.env_id as u64, self.episode_counter];
                let policy_rng = rng::stream(self.seed, &[purpose::POLICY, self.env_id as u64, self.episode_counter]);
                self.episode_counter += 1;
                self.start_episode(rng::derive_seed(self.seed, &tags), policy_rng).map_err(|e| e.to_string())?;
            }
            if !buffer.groups().last().is_some_and(|g| g.tail.is_none()) {
                stats.push(RunningNormalizer::new(dim));
            }
            let s = stats.last_mut().expect("one statistics block per group");
            self.step(snapshot, &mut buffer, s, &mut episodes)?;
        }
        if let Some(ep) = &self.active {
            if buffer.groups().last().is_some_and(|g| g.tail.is_none()) {
                let v = Self::value_of(snapshot, &ep.raw_obs).map_err(|e| e.to_string())?;
                buffer.close_group(self.env_id, TailKind::PartialBootstrap, Some(v)).map_err(|e| e.to_string())?;
            }
        }
        Ok(self.report(buffer, stats, episodes, busy.elapsed()))
    }

    fn run_episodes(&mut self, snapshot: &PolicySnapshot, keys: &[u64]) -> Result<WorkerReport, String> {
        let busy = Instant::now();
        self.env_time = Duration::ZERO;
        let mut buffer = RolloutBuffer::new(true);
        let mut stats = Vec::new();
        let mut episodes = Vec::new();
        let dim = self.env.observation_dim();
        for &key in keys {
            let policy_rng = rng::stream(self.seed, &[purpose::POLICY, key]);
            self.start_episode(rng::derive_seed(self.seed, &[purpose::ENV, key]), policy_rng)
                .map_err(|e| e.to_string())?;
            let mut s = RunningNormalizer::new(dim);
            while self.active.is_some() {
                self.step(snapshot, &mut buffer, &mut s, &mut episodes)?;
            }
            stats.push(s);
        }
        Ok(self.report(buffer, stats, episodes, busy.elapsed()))
    }

    fn report(
        &self,
        buffer: RolloutBuffer,
        stats: Vec<RunningNormalizer>,
        episodes: Vec<EpisodeRecord>,
        busy_time: Duration,
    ) -> WorkerReport {
        WorkerReport {
            env_id: self.env_id,
            groups: buffer.groups().to_vec(),
            stats,
            episodes,
            env_time: self.env_time,
            busy_time,
        }
    }
}

type ReportResult = Result<WorkerReport, (usize, String)>;

/// Transitions gathered by all workers for one synchronization round.
pub struct CollectedRound {
    /// Groups ordered by env_id, then by step.
    pub groups: Vec<Group>,
    pub stats: Vec<RunningNormalizer>,
    pub episodes: Vec<EpisodeRecord>,
    /// Wall time spent waiting for the round.
    pub wall: Duration,
    /// Share of summed worker busy time spent inside environment steps.
    pub env_share: f64,
}

pub struct Collector {
    plan: SegmentPlan,
    senders: Vec<Sender<Command>>,
    results: Receiver<ReportResult>,
    handles: Vec<JoinHandle<()>>,
    next_episode: u64,
    observation_dim: usize,
    action_dim: usize,
}

impl Collector {
    /// Builds one environment per worker and starts the worker threads.
    pub fn spawn(factory: EnvFactory, plan: SegmentPlan, seed: u64) -> Result<Self, CollectError> {
        let (result_tx, results) = mpsc::channel::<ReportResult>();
        let mut senders = Vec::with_capacity(plan.n_env);
        let mut handles = Vec::with_capacity(plan.n_env);
        let mut dims = None;
        for env_id in 0..plan.n_env {
            let env = factory(env_id).map_err(|e| CollectError::Worker { env_id, message: e.to_string() })?;
            if env.episode_length() != plan.episode_length {
                return Err(CollectError::Config(format!(
                    "environment episode length {} differs from the plan's {}",
                    env.episode_length(),
                    plan.episode_length
                )));
            }
            dims.get_or_insert((env.observation_dim(), env.action_dim()));
            let (tx, rx) = mpsc::channel::<Command>();
            let out = result_tx.clone();
            let mut worker = Worker { env_id, env, seed, episode_counter: 0, active: None, env_time: Duration::ZERO };
            let handle = std::thread::Builder::new()
                .name(format!("collector-{env_id}"))
                .spawn(move || {
                    for cmd in rx {
                        let report = match cmd {
                            Command::Segment { snapshot, steps } => worker.run_segment(&snapshot, steps),
                            Command::Episodes { snapshot, keys } => worker.run_episodes(&snapshot, &keys),
                        };
                        if out.send(report.map_err(|m| (env_id, m))).is_err() {
                            break;
                        }
                    }
                })
                .map_err(|e| CollectError::Worker { env_id, message: e.to_string() })?;
            senders.push(tx);
            handles.push(handle);
        }
        let (observation_dim, action_dim) = dims.expect("n_env >= 1");
        Ok(Self { plan, senders, results, handles, next_episode: 0, observation_dim, action_dim })
    }

    pub fn plan(&self) -> &SegmentPlan {
        &self.plan
    }

    pub fn observation_dim(&self) -> usize {
        self.observation_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn gather(&mut self, started: Instant) -> Result<CollectedRound, CollectError> {
        let mut reports: Vec<Option<WorkerReport>> = (0..self.plan.n_env).map(|_| None).collect();
        let mut failure = None;
        for _ in 0..self.plan.n_env {
            match self.results.recv() {
                Ok(Ok(r)) => {
                    let id = r.env_id;
                    reports[id] = Some(r);
                }
                Ok(Err((env_id, message))) => {
                    failure.get_or_insert(CollectError::Worker { env_id, message });
                }
                Err(_) => {
                    return Err(CollectError::Worker { env_id: usize::MAX, message: "worker channel closed".into() })
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        let wall = started.elapsed();
        let mut round = CollectedRound { groups: Vec::new(), stats: Vec::new(), episodes: Vec::new(), wall, env_share: 0.0 };
        let (mut env_t, mut busy_t) = (0.0, 0.0);
        for r in reports.into_iter().flatten() {
            env_t += r.env_time.as_secs_f64();
            busy_t += r.busy_time.as_secs_f64();
            round.groups.extend(r.groups);
            round.stats.extend(r.stats);
            round.episodes.extend(r.episodes);
        }
        round.env_share = if busy_t > 0.0 { (env_t / busy_t).clamp(0.0, 1.0) } else { 0.0 };
        Ok(round)
    }

    /// Every worker unrolls `steps_per_env` transitions (`EoePt`).
    pub fn collect_segment(&mut self, snapshot: Arc<PolicySnapshot>) -> Result<CollectedRound, CollectError> {
        let steps = self
            .plan
            .steps_per_env
            .ok_or_else(|| CollectError::Config("segments are only defined in eoe_pt mode".into()))?;
        let started = Instant::now();
        for tx in &self.senders {
            tx.send(Command::Segment { snapshot: Arc::clone(&snapshot), steps })
                .map_err(|_| CollectError::Config("worker stopped".into()))?;
        }
        self.gather(started)
    }

    /// One whole episode per worker; episode `k` of the run is played by
    /// worker `k mod n_env` with streams keyed by `k`.
    pub fn collect_round(&mut self, snapshot: Arc<PolicySnapshot>) -> Result<CollectedRound, CollectError> {
        let started = Instant::now();
        for (env_id, tx) in self.senders.iter().enumerate() {
            let key = self.next_episode + env_id as u64;
            tx.send(Command::Episodes { snapshot: Arc::clone(&snapshot), keys: vec![key] })
                .map_err(|_| CollectError::Config("worker stopped".into()))?;
        }
        self.next_episode += self.plan.n_env as u64;
        self.gather(started)
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Per-update log entry of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub update_index: usize,
    /// Cumulative transitions consumed by updates so far.
    pub transitions: usize,
    pub walltime_s: f64,
    /// Version after the update.
    pub policy_version: PolicyVersion,
    pub score_mean: f64,
    pub score_min: f64,
    pub score_max: f64,
    pub metrics: UpdateMetrics,
    pub offpolicy_fraction: f64,
    pub env_time_s: f64,
    pub train_time_s: f64,
    pub other_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub updates: Vec<UpdateRecord>,
    /// Every completed episode, in completion order.
    pub episodes: Vec<EpisodeRecord>,
}

/// Hook called after every update; may stop the run with an error.
pub type UpdateHook<'a> = dyn FnMut(&UpdateRecord, &Agent) -> Result<(), CollectError> + 'a;

struct LoopState {
    start: Instant,
    last_wall: f64,
    pending_env: f64,
    pending_policy: f64,
    pending_episodes: Vec<EpisodeRecord>,
    score: (f64, f64, f64),
    transitions: usize,
}

impl LoopState {
    fn absorb(&mut self, round: &CollectedRound, trace: &mut TrainingTrace) {
        let wall = round.wall.as_secs_f64();
        self.pending_env += wall * round.env_share;
        self.pending_policy += wall * (1.0 - round.env_share);
        self.pending_episodes.extend(round.episodes.iter().cloned());
        trace.episodes.extend(round.episodes.iter().cloned());
    }
}

/// Merges groups into one buffer and folds their observation statistics
/// into the agent, in buffer order.
fn build_update(
    agent: &mut Agent,
    groups: Vec<Group>,
    stats: &[RunningNormalizer],
    strict: bool,
) -> Result<RolloutBuffer, CollectError> {
    let mut buffer = RolloutBuffer::new(strict);
    for g in groups {
        let env_id = g.env_id;
        for t in g.transitions {
            buffer.append_transition(t)?;
        }
        let tail = g.tail.ok_or_else(|| RolloutError::Contract(format!("env {env_id} returned an open group")))?;
        buffer.close_group(env_id, tail.kind, tail.value)?;
    }
    for s in stats {
        agent.normalizer.merge(s);
    }
    Ok(buffer)
}

fn finish_update(
    agent: &mut Agent,
    mut buffer: RolloutBuffer,
    plan: &SegmentPlan,
    state: &mut LoopState,
    trace: &mut TrainingTrace,
    hook: &mut UpdateHook<'_>,
) -> Result<(), CollectError> {
    let cfg = agent.config.clone();
    buffer.assemble(cfg.gamma, cfg.gae_lambda, plan.mode.eoe_bootstrap())?;
    let report = verify_on_policy(&buffer, agent.version);
    let t = Instant::now();
    let metrics = agent.update(&buffer, plan.mode != CollectMode::EoePt)?;
    let train = t.elapsed().as_secs_f64() + state.pending_policy;
    state.transitions += buffer.len();
    if !state.pending_episodes.is_empty() {
        let scores: Vec<f64> = state.pending_episodes.iter().map(EpisodeRecord::score).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        state.score = (mean, min, max);
        state.pending_episodes.clear();
    }
    let walltime = state.start.elapsed().as_secs_f64();
    let delta = walltime - state.last_wall;
    let env = state.pending_env.min(delta);
    let train = train.min(delta - env);
    let record = UpdateRecord {
        update_index: trace.updates.len(),
        transitions: state.transitions,
        walltime_s: walltime,
        policy_version: agent.version,
        score_mean: state.score.0,
        score_min: state.score.1,
        score_max: state.score.2,
        metrics,
        offpolicy_fraction: report.fraction(),
        env_time_s: env,
        train_time_s: train,
        other_time_s: delta - env - train,
    };
    state.last_wall = walltime;
    state.pending_env = 0.0;
    state.pending_policy = 0.0;
    hook(&record, agent)?;
    trace.updates.push(record);
    Ok(())
}

/// Alternates collection and updates until `total_transitions / (n_update * T)`
/// updates have run; a trailing partial update is dropped.
pub fn run_collection_loop(
    agent: &mut Agent,
    collector: &mut Collector,
    total_transitions: usize,
    hook: &mut UpdateHook<'_>,
) -> Result<TrainingTrace, CollectError> {
    let plan = *collector.plan();
    if agent.observation_dim() != collector.observation_dim() || agent.action_dim() != collector.action_dim() {
        return Err(CollectError::Config(format!(
            "agent dimensions ({}, {}) do not match the environment ({}, {})",
            agent.observation_dim(),
            agent.action_dim(),
            collector.observation_dim(),
            collector.action_dim()
        )));
    }
    let n_updates = total_transitions / plan.transitions_per_update;
    let mut trace = TrainingTrace::default();
    let mut state = LoopState {
        start: Instant::now(),
        last_wall: 0.0,
        pending_env: 0.0,
        pending_policy: 0.0,
        pending_episodes: Vec::new(),
        score: (f64::NAN, f64::NAN, f64::NAN),
        transitions: 0,
    };
    let mut queue: VecDeque<(Group, RunningNormalizer)> = VecDeque::new();
    while trace.updates.len() < n_updates {
        match plan.mode {
            CollectMode::EoePt => {
                let round = collector.collect_segment(agent.snapshot())?;
                state.absorb(&round, &mut trace);
                let buffer = build_update(agent, round.groups, &round.stats, true)?;
                finish_update(agent, buffer, &plan, &mut state, &mut trace, hook)?;
            }
            CollectMode::Regular | CollectMode::EoeOnly => {
                if queue.len() < plan.n_update {
                    let round = collector.collect_round(agent.snapshot())?;
                    state.absorb(&round, &mut trace);
                    queue.extend(round.groups.into_iter().zip(round.stats));
                    continue;
                }
                let (groups, stats): (Vec<Group>, Vec<RunningNormalizer>) = queue.drain(..plan.n_update).unzip();
                let buffer = build_update(agent, groups, &stats, false)?;
                finish_update(agent, buffer, &plan, &mut state, &mut trace, hook)?;
            }
        }
    }
    Ok(trace)
}

/// First update buffer of a run, assembled but not trained on. Used to check
/// that the parallel layout does not change what gets collected.
pub fn first_update_buffer(agent: &mut Agent, collector: &mut Collector) -> Result<RolloutBuffer, CollectError> {
    let plan = *collector.plan();
    let cfg = agent.config.clone();
    let mut buffer = match plan.mode {
        CollectMode::EoePt => {
            let round = collector.collect_segment(agent.snapshot())?;
            build_update(agent, round.groups, &round.stats, true)?
        }
        _ => {
            let mut queue = Vec::new();
            while queue.len() < plan.n_update {
                let round = collector.collect_round(agent.snapshot())?;
                queue.extend(round.groups.into_iter().zip(round.stats));
            }
            let (groups, stats): (Vec<Group>, Vec<RunningNormalizer>) = queue.drain(..plan.n_update).unzip();
            build_update(agent, groups, &stats, false)?
        }
    };
    buffer.assemble(cfg.gamma, cfg.gae_lambda, plan.mode.eoe_bootstrap())?;
    Ok(buffer)
}
