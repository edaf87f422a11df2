//! Experiment drivers behind the command-line interface: initial-state
//! generation, training runs with logs and checkpoints, deterministic
//! evaluation, speedup benchmarks and cross-run aggregation.

pub mod checkpoint;
pub mod config;
pub mod log;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::collector::{plan_segments, run_collection_loop, CollectError, CollectMode, Collector, EnvFactory, TrainingTrace};
use crate::env::{self, EnvError, Environment, Pendulum, ShkadovEnv};
use crate::policy::{Agent, PolicyError};
use crate::rng::{self, purpose};
use crate::solver::{self, SolverError};

pub use checkpoint::CheckpointError;
pub use config::{ConfigError, EnvKind, RunConfig};
pub use log::LogError;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io { path: path.display().to_string(), source }
}

pub fn read_config(path: &Path) -> Result<RunConfig, TrainerError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(RunConfig::from_text(&text)?)
}

/// Environment constructor for collection workers. Shkadov initial states
/// are loaded once and shared.
pub fn env_factory(config: &RunConfig) -> Result<EnvFactory, TrainerError> {
    let seed = config.seed;
    Ok(match config.env {
        EnvKind::Shkadov => {
            let cfg = config.shkadov.clone();
            let states = Arc::new(env::load_initial_states(&cfg)?);
            Arc::new(move |env_id| {
                let s = rng::derive_seed(seed, &[purpose::ENV, env_id as u64]);
                Ok(Box::new(ShkadovEnv::with_initial_states(cfg.clone(), Arc::clone(&states), s)?) as Box<dyn Environment>)
            })
        }
        EnvKind::Pendulum => {
            let cfg = config.pendulum.clone();
            Arc::new(move |env_id| {
                let s = rng::derive_seed(seed, &[purpose::ENV, env_id as u64]);
                Ok(Box::new(Pendulum::new(cfg.clone(), s)) as Box<dyn Environment>)
            })
        }
    })
}

/// Output files of a training run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl RunFiles {
    pub fn new(config: &RunConfig) -> Self {
        let dir = config.out_dir.join(&config.run_id);
        Self {
            log: dir.join("log.csv"),
            config: dir.join("config.txt"),
            final_checkpoint: dir.join("checkpoint_final.ppob"),
            dir,
        }
    }

    pub fn checkpoint(&self, update: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_{update:05}.ppob"))
    }
}

/// Runs a training job with a fresh agent. With `files`, writes the resolved
/// config, one log row per update and checkpoints.
pub fn train(config: &RunConfig, files: Option<&RunFiles>) -> Result<(Agent, TrainingTrace), TrainerError> {
    config.validate()?;
    let plan = plan_segments(config.n_env, config.n_update, config.episode_length(), config.mode)?;
    let mut collector = Collector::spawn(env_factory(config)?, plan, config.seed)?;
    let mut agent = Agent::new(collector.observation_dim(), collector.action_dim(), config.ppo.clone(), config.seed)?;
    let mut log_file = match files {
        Some(f) => {
            std::fs::create_dir_all(&f.dir).map_err(io_err(&f.dir))?;
            std::fs::write(&f.config, config.to_text()).map_err(io_err(&f.config))?;
            let mut file = std::fs::File::create(&f.log).map_err(io_err(&f.log))?;
            file.write_all(log::header().as_bytes()).map_err(io_err(&f.log))?;
            Some(file)
        }
        None => None,
    };
    let run_id = config.run_id.clone();
    let every = config.checkpoint_every;
    let trace = run_collection_loop(&mut agent, &mut collector, config.total_transitions, &mut |record, agent| {
        if let (Some(f), Some(file)) = (files, log_file.as_mut()) {
            writeln!(file, "{}", log::LogRow::from_record(&run_id, record).to_line())
                .and_then(|_| file.flush())
                .map_err(|e| CollectError::Callback(format!("{}: {e}", f.log.display())))?;
            let done = record.update_index + 1;
            if every > 0 && done % every == 0 {
                checkpoint::save(agent, &f.checkpoint(done)).map_err(|e| CollectError::Callback(e.to_string()))?;
            }
        }
        Ok(())
    })?;
    if let Some(f) = files {
        checkpoint::save(&agent, &f.final_checkpoint)?;
    }
    Ok((agent, trace))
}

/// Which actions an evaluation rollout takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPolicy {
    /// Policy mean, i.e. the deterministic action.
    Mean,
    /// Zero actuation.
    Uncontrolled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rewards: Vec<f64>,
    /// Largest `|h - 1|` inside the reward regions after every action (Shkadov only).
    pub max_deviation: Vec<f64>,
    pub snapshot_files: Vec<PathBuf>,
}

impl EvalReport {
    pub fn score(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }
}

/// One deterministic episode. Shkadov snapshots are written at the requested
/// action counts into `snapshot_dir`.
pub fn evaluate(
    config: &RunConfig,
    agent: &Agent,
    policy: EvalPolicy,
    snapshot_times: &[usize],
    snapshot_dir: Option<&Path>,
    episode_seed: u64,
) -> Result<EvalReport, TrainerError> {
    let snapshot = agent.snapshot();
    let mut report = EvalReport { rewards: Vec::new(), max_deviation: Vec::new(), snapshot_files: Vec::new() };
    // the film is kept as a concrete type so its state can be inspected
    let (mut film, mut other): (Option<ShkadovEnv>, Option<Pendulum>) = match config.env {
        EnvKind::Shkadov => {
            let states = Arc::new(env::load_initial_states(&config.shkadov)?);
            (Some(ShkadovEnv::with_initial_states(config.shkadov.clone(), states, episode_seed)?), None)
        }
        EnvKind::Pendulum => (None, Some(Pendulum::new(config.pendulum.clone(), episode_seed))),
    };
    let env: &mut dyn Environment = match (film.as_mut(), other.as_mut()) {
        (Some(f), _) => f,
        (_, Some(p)) => p,
        _ => unreachable!("one environment is always built"),
    };
    if env.observation_dim() != agent.observation_dim() || env.action_dim() != agent.action_dim() {
        return Err(TrainerError::Usage(format!(
            "checkpoint expects observation/action dims ({}, {}), environment has ({}, {})",
            agent.observation_dim(),
            agent.action_dim(),
            env.observation_dim(),
            env.action_dim()
        )));
    }
    if let Some(dir) = snapshot_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut obs = env.reset()?;
    let dump = |film: &ShkadovEnv, report: &mut EvalReport| -> Result<(), TrainerError> {
        let actions = film.actions_taken();
        if let Some(dir) = snapshot_dir.filter(|_| snapshot_times.contains(&actions)) {
            let path = dir.join(format!("field_{actions:04}.txt"));
            solver::write_snapshot(&path, film.state(), film.config().dx, film.config().delta)?;
            report.snapshot_files.push(path);
        }
        Ok(())
    };
    if let Some(f) = &film {
        dump(f, &mut report)?;
    }
    loop {
        let action = match policy {
            EvalPolicy::Mean => snapshot.policy(&snapshot.normalizer.apply(&obs))?.mean,
            EvalPolicy::Uncontrolled => vec![0.0; agent.action_dim()],
        };
        let result = match (film.as_mut(), other.as_mut()) {
            (Some(f), _) => f.step(&action)?,
            (_, Some(p)) => p.step(&action)?,
            _ => unreachable!("one environment is always built"),
        };
        report.rewards.push(result.reward);
        if let Some(f) = &film {
            let dev = f
                .layout()
                .reward_regions()
                .iter()
                .flat_map(|r| f.state().h[r.clone()].iter())
                .fold(0.0f64, |m, h| m.max((h - 1.0).abs()));
            report.max_deviation.push(dev);
            dump(f, &mut report)?;
        }
        obs = result.observation;
        if result.done_reason.is_done() {
            break;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub n_env: usize,
    pub walltime_s: f64,
    /// `walltime(1) / walltime(n_env)`.
    pub speedup: f64,
    /// Perfect-scaling reference, equal to `n_env`.
    pub perfect: f64,
}

/// Fixed-budget training runs for each environment count. A single-env run
/// is always included as the baseline.
pub fn bench_speedup(config: &RunConfig, env_counts: &[usize], budget: usize) -> Result<Vec<SpeedupRow>, TrainerError> {
    let mut counts: Vec<usize> = env_counts.to_vec();
    if !counts.contains(&1) {
        counts.insert(0, 1);
    }
    counts.sort_unstable();
    counts.dedup();
    let mut rows = Vec::new();
    let mut base = None;
    for &n_env in &counts {
        let cfg = RunConfig { n_env, total_transitions: budget, ..config.clone() };
        let start = Instant::now();
        train(&cfg, None)?;
        let wall = start.elapsed().as_secs_f64();
        let base_wall = *base.get_or_insert(wall);
        rows.push(SpeedupRow { n_env, walltime_s: wall, speedup: base_wall / wall, perfect: n_env as f64 });
    }
    Ok(rows)
}

/// Published speedups for comparison in reports.
pub fn published_speedup(n_env: usize) -> Option<f64> {
    match n_env {
        8 => Some(7.6),
        32 => Some(25.4),
        _ => None,
    }
}

pub fn format_speedup_table(mode: CollectMode, rows: &[SpeedupRow]) -> String {
    let mut out = String::from("mode,n_env,walltime_s,speedup,perfect,reference\n");
    for r in rows {
        let reference = published_speedup(r.n_env).map_or_else(|| "-".to_string(), |v| v.to_string());
        out.push_str(&format!("{mode},{},{:.3},{:.3},{},{reference}\n", r.n_env, r.walltime_s, r.speedup, r.perfect));
    }
    out
}

pub fn aggregate_files(paths: &[PathBuf]) -> Result<String, TrainerError> {
    let mut runs = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        runs.push(log::parse_log(&text, &p.display().to_string())?);
    }
    Ok(log::aggregate(&runs)?)
}
