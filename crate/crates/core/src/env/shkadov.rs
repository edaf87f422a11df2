//! Falling-film control with localized flow-rate jets.
//!
//! Each jet injects a parabolic flow-rate profile whose strength is set by the
//! agent. The agent observes film heights upstream of every jet and is
//! rewarded for keeping the film flat downstream of it.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use super::{DoneReason, EnvError, Environment, StepResult};
use crate::rng::{self, purpose, StreamRng};
use crate::solver::{self, FilmState, Grid, SolverConfig, SolverError, Stepper};

#[derive(Debug, Clone, PartialEq)]
pub struct ShkadovEnvConfig {
    pub n_jets: usize,
    /// Position of the first jet center.
    pub x0: f64,
    pub jet_spacing: f64,
    /// Domain length without jets; the total is `base_length + (n_jets + 2) * jet_spacing`.
    pub base_length: f64,
    pub jet_width: f64,
    pub amplitude: f64,
    pub obs_length: f64,
    pub reward_length: f64,
    /// Duration of the linear ramp between consecutive actions.
    pub dt_int: f64,
    /// Duration over which the new action is held after the ramp.
    pub dt_const: f64,
    pub actions_per_episode: usize,
    pub delta: f64,
    pub dt: f64,
    pub eps: f64,
    pub dx: f64,
    pub init_state_dir: PathBuf,
    pub init_t_min: f64,
    pub init_t_max: f64,
}

impl Default for ShkadovEnvConfig {
    fn default() -> Self {
        Self {
            n_jets: 1,
            x0: 150.0,
            jet_spacing: 10.0,
            base_length: 150.0,
            jet_width: 4.0,
            amplitude: 5.0,
            obs_length: 10.0,
            reward_length: 10.0,
            dt_int: 0.01,
            dt_const: 0.04,
            actions_per_episode: 400,
            delta: 0.1,
            dt: 0.005,
            eps: 5e-4,
            dx: 0.5,
            init_state_dir: PathBuf::from("init_states"),
            init_t_min: 200.0,
            init_t_max: 220.0,
        }
    }
}

impl ShkadovEnvConfig {
    pub fn domain_length(&self) -> f64 {
        self.base_length + (self.n_jets as f64 + 2.0) * self.jet_spacing
    }

    pub fn grid(&self) -> Result<Grid, EnvError> {
        Ok(Grid::for_length(self.domain_length(), self.dx)?)
    }

    pub fn solver_config(&self) -> Result<SolverConfig, EnvError> {
        Ok(SolverConfig::new(self.delta, self.dt, self.eps, self.grid()?)?)
    }

    pub fn jet_center(&self, j: usize) -> f64 {
        self.x0 + j as f64 * self.jet_spacing
    }

    pub fn dt_act(&self) -> f64 {
        self.dt_int + self.dt_const
    }
}

fn first_index_at_or_after(x: f64, dx: f64) -> usize {
    (x / dx - 1e-9).ceil().max(0.0) as usize
}

fn last_index_at_or_before(x: f64, dx: f64) -> isize {
    (x / dx + 1e-9).floor() as isize
}

/// Grid-index view of a jet configuration.
#[derive(Debug, Clone)]
pub struct JetLayout {
    grid: Grid,
    amplitude: f64,
    /// Per jet: first node of the support and the parabolic profile factors.
    profiles: Vec<(usize, Vec<f64>)>,
    /// Per jet: nodes in `[x_j - l_obs, x_j)`.
    obs_regions: Vec<Range<usize>>,
    /// Per jet: nodes in `(x_j, x_j + l_rwd]`.
    reward_regions: Vec<Range<usize>>,
    reward_norm: f64,
    substeps: usize,
}

impl JetLayout {
    pub fn new(config: &ShkadovEnvConfig) -> Result<Self, EnvError> {
        let bad = |msg: String| Err(EnvError::Config(msg));
        if config.n_jets == 0 {
            return bad("at least one jet is required".into());
        }
        if !(config.jet_width > 0.0) {
            return bad(format!("jet width must be positive, got {}", config.jet_width));
        }
        if config.n_jets > 1 && config.jet_spacing < config.jet_width {
            return bad(format!(
                "jet supports overlap: spacing {} is smaller than width {}",
                config.jet_spacing, config.jet_width
            ));
        }
        if !(config.obs_length > 0.0 && config.reward_length > 0.0) {
            return bad("observation and reward lengths must be positive".into());
        }
        if config.actions_per_episode == 0 {
            return bad("actions_per_episode must be at least 1".into());
        }
        if !(config.init_t_min >= 0.0 && config.init_t_max >= config.init_t_min) {
            return bad(format!("bad initial-state time range [{}, {}]", config.init_t_min, config.init_t_max));
        }
        let grid = config.grid()?;
        let dx = grid.dx();
        let length = grid.length();

        let ratio = config.dt_act() / config.dt;
        let substeps = ratio.round();
        if !(config.dt_int >= 0.0 && config.dt_const >= 0.0) || substeps < 1.0 || (ratio - substeps).abs() > 1e-6 {
            return bad(format!(
                "action duration {} is not a positive integer multiple of the solver step {}",
                config.dt_act(),
                config.dt
            ));
        }

        let mut profiles = Vec::with_capacity(config.n_jets);
        let mut obs_regions = Vec::with_capacity(config.n_jets);
        let mut reward_regions = Vec::with_capacity(config.n_jets);
        for j in 0..config.n_jets {
            let xc = config.jet_center(j);
            let (xl, xr) = (xc - config.jet_width / 2.0, xc + config.jet_width / 2.0);
            let obs_start = xc - config.obs_length;
            let rwd_end = xc + config.reward_length;
            if obs_start < 0.0 || xl < 0.0 || rwd_end > length + 1e-9 || xr > length + 1e-9 {
                return bad(format!(
                    "jet {j} regions [{obs_start}, {rwd_end}] do not fit in the domain [0, {length}]"
                ));
            }
            let first = first_index_at_or_after(xl, dx);
            let last = last_index_at_or_before(xr, dx).max(first as isize - 1) as usize;
            let width2 = config.jet_width * config.jet_width;
            let factors = (first..=last)
                .map(|i| {
                    let x = grid.x_of(i);
                    (4.0 * (x - xl) * (xr - x) / width2).max(0.0)
                })
                .collect();
            profiles.push((first, factors));
            obs_regions.push(first_index_at_or_after(obs_start, dx)..first_index_at_or_after(xc, dx));
            let rwd_first = (last_index_at_or_before(xc, dx) + 1) as usize;
            let rwd_last = last_index_at_or_before(rwd_end, dx) as usize;
            reward_regions.push(rwd_first..rwd_last + 1);
        }
        Ok(Self {
            grid,
            amplitude: config.amplitude,
            profiles,
            obs_regions,
            reward_regions,
            reward_norm: 1.0 / (config.reward_length * config.n_jets as f64),
            substeps: substeps as usize,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_jets(&self) -> usize {
        self.profiles.len()
    }

    pub fn obs_regions(&self) -> &[Range<usize>] {
        &self.obs_regions
    }

    pub fn reward_regions(&self) -> &[Range<usize>] {
        &self.reward_regions
    }

    /// Solver steps per action.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn observation_dim(&self) -> usize {
        self.obs_regions.iter().map(|r| r.len()).sum()
    }

    pub fn forcing_into(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((start, factors), &uj) in self.profiles.iter().zip(u) {
            for (k, f) in factors.iter().enumerate() {
                out[start + k] += self.amplitude * uj * f;
            }
        }
    }

    pub fn observe(&self, state: &FilmState) -> Vec<f64> {
        self.obs_regions.iter().flat_map(|r| state.h[r.clone()].iter().copied()).collect()
    }

    pub fn reward(&self, state: &FilmState) -> f64 {
        let sum: f64 = self
            .reward_regions
            .iter()
            .flat_map(|r| state.h[r.clone()].iter())
            .map(|h| (h - 1.0) * (h - 1.0))
            .sum();
        -self.reward_norm * sum
    }
}

/// Flow-rate injection on the grid for jet strengths `u`.
pub fn jet_forcing(u: &[f64], config: &ShkadovEnvConfig) -> Result<Vec<f64>, EnvError> {
    let layout = JetLayout::new(config)?;
    if u.len() != layout.n_jets() {
        return Err(EnvError::ActionDim { expected: layout.n_jets(), got: u.len() });
    }
    let mut out = vec![0.0; layout.grid.n()];
    layout.forcing_into(u, &mut out);
    Ok(out)
}

/// Ramp from the previous action to the new one, then hold.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSchedule {
    pub u_prev: Vec<f64>,
    pub u_new: Vec<f64>,
    pub t_start: f64,
}

impl ActionSchedule {
    pub fn at_rest(n_jets: usize) -> Self {
        Self { u_prev: vec![0.0; n_jets], u_new: vec![0.0; n_jets], t_start: 0.0 }
    }
}

pub fn interpolate_action(schedule: &ActionSchedule, t: f64, config: &ShkadovEnvConfig) -> Vec<f64> {
    // saturate within rounding of the ramp end so `t_start + dt_int` gives `u_new` exactly
    let alpha = if config.dt_int > 0.0 { (t - schedule.t_start) / config.dt_int } else { 1.0 };
    let alpha = if alpha >= 1.0 - 1e-9 { 1.0 } else { alpha.max(0.0) };
    schedule
        .u_prev
        .iter()
        .zip(&schedule.u_new)
        .map(|(&a, &b)| if alpha >= 1.0 { b } else { (1.0 - alpha) * a + alpha * b })
        .collect()
}

pub fn observe(state: &FilmState, config: &ShkadovEnvConfig) -> Result<Vec<f64>, EnvError> {
    Ok(JetLayout::new(config)?.observe(state))
}

pub fn compute_reward(state: &FilmState, config: &ShkadovEnvConfig) -> Result<f64, EnvError> {
    Ok(JetLayout::new(config)?.reward(state))
}

/// Reads every snapshot in the configured directory (sorted by file name).
pub fn load_initial_states(config: &ShkadovEnvConfig) -> Result<Vec<FilmState>, EnvError> {
    let grid = config.grid()?;
    let dir = &config.init_state_dir;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| EnvError::Config(format!("cannot read initial-state directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EnvError::Config(format!("no snapshots found in {}", dir.display())));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    paths
        .iter()
        .map(|path| {
            let (header, state) = solver::read_snapshot(path)?;
            if header.n != grid.n() || !close(header.dx, grid.dx()) || !close(header.delta, config.delta) {
                return Err(EnvError::Config(format!(
                    "snapshot {} has n={} dx={} delta={}, expected n={} dx={} delta={}",
                    path.display(),
                    header.n,
                    header.dx,
                    header.delta,
                    grid.n(),
                    grid.dx(),
                    config.delta
                )));
            }
            Ok(state)
        })
        .collect()
}

const GENERATION_ATTEMPTS: u64 = 4;

/// Integrates uncontrolled films from a flat start to independent random times
/// in `[init_t_min, init_t_max]` and writes them as snapshots into `out_dir`.
///
/// Samples are spread over the available threads; each sample owns a random
/// stream keyed by its index, so the output does not depend on the thread count.
pub fn generate_initial_states(
    config: &ShkadovEnvConfig,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EnvError> {
    if count == 0 {
        return Err(EnvError::Config("count must be at least 1".into()));
    }
    JetLayout::new(config)?;
    let solver_cfg = config.solver_config()?;
    fs::create_dir_all(out_dir)?;
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(count);
    let results: Vec<Result<PathBuf, EnvError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|worker| {
                let solver_cfg = &solver_cfg;
                scope.spawn(move || {
                    (worker..count)
                        .step_by(threads)
                        .map(|i| {
                            let state = generate_one(config, solver_cfg, seed, i as u64)?;
                            let path = out_dir.join(format!("init_{i:04}.txt"));
                            solver::write_snapshot(&path, &state, solver_cfg.grid.dx(), solver_cfg.delta)?;
                            Ok((i, path))
                        })
                        .collect::<Vec<Result<(usize, PathBuf), EnvError>>>()
                })
            })
            .collect();
        let mut indexed: Vec<(usize, Result<PathBuf, EnvError>)> = Vec::with_capacity(count);
        for handle in handles {
            for item in handle.join().expect("state generation thread panicked") {
                match item {
                    Ok((i, path)) => indexed.push((i, Ok(path))),
                    Err(e) => indexed.push((usize::MAX, Err(e))),
                }
            }
        }
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, r)| r).collect()
    });
    results.into_iter().collect()
}

fn generate_one(
    config: &ShkadovEnvConfig,
    solver_cfg: &SolverConfig,
    seed: u64,
    index: u64,
) -> Result<FilmState, EnvError> {
    let mut last_err = None;
    for attempt in 0..GENERATION_ATTEMPTS {
        let mut rng = rng::stream(seed, &[purpose::GEN_STATES, index, attempt]);
        let t_init = if config.init_t_max > config.init_t_min {
            rng.random_range(config.init_t_min..=config.init_t_max)
        } else {
            config.init_t_min
        };
        let steps = (t_init / solver_cfg.dt).round() as u64;
        let mut stepper = Stepper::new(solver_cfg.clone())?;
        let mut state = FilmState::flat(&solver_cfg.grid);
        let forcing = vec![0.0; solver_cfg.grid.n()];
        let outcome = (0..steps).try_for_each(|_| stepper.step(&mut state, &forcing, &mut rng));
        match outcome {
            Ok(()) => return Ok(state),
            Err(e @ SolverError::Divergence { .. }) => last_err = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last_err.expect("at least one attempt").into())
}

/// Falling-film control environment.
pub struct ShkadovEnv {
    config: ShkadovEnvConfig,
    layout: JetLayout,
    stepper: Stepper,
    initial_states: Arc<Vec<FilmState>>,
    state: FilmState,
    schedule: ActionSchedule,
    forcing: Vec<f64>,
    rng: StreamRng,
    actions_taken: usize,
    done: bool,
}

impl ShkadovEnv {
    /// Environment drawing its initial states from the configured directory.
    pub fn from_dir(config: ShkadovEnvConfig, seed: u64) -> Result<Self, EnvError> {
        let states = load_initial_states(&config)?;
        Self::with_initial_states(config, Arc::new(states), seed)
    }

    pub fn with_initial_states(
        config: ShkadovEnvConfig,
        initial_states: Arc<Vec<FilmState>>,
        seed: u64,
    ) -> Result<Self, EnvError> {
        let layout = JetLayout::new(&config)?;
        let n = layout.grid.n();
        if initial_states.is_empty() {
            return Err(EnvError::Config("initial-state set is empty".into()));
        }
        if let Some(k) = initial_states.iter().position(|s| s.len() != n) {
            return Err(EnvError::Config(format!(
                "initial state {k} has {} nodes, expected {n}",
                initial_states[k].len()
            )));
        }
        let stepper = Stepper::new(config.solver_config()?)?;
        let state = initial_states[0].clone();
        Ok(Self {
            schedule: ActionSchedule::at_rest(config.n_jets),
            config,
            stepper,
            state,
            forcing: vec![0.0; n],
            initial_states,
            rng: rng::stream(seed, &[purpose::ENV]),
            layout,
            actions_taken: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &ShkadovEnvConfig {
        &self.config
    }

    pub fn layout(&self) -> &JetLayout {
        &self.layout
    }

    pub fn state(&self) -> &FilmState {
        &self.state
    }

    pub fn actions_taken(&self) -> usize {
        self.actions_taken
    }
}

impl Environment for ShkadovEnv {
    fn observation_dim(&self) -> usize {
        self.layout.observation_dim()
    }

    fn action_dim(&self) -> usize {
        self.config.n_jets
    }

    fn episode_length(&self) -> usize {
        self.config.actions_per_episode
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = rng::stream(seed, &[purpose::ENV]);
    }

    fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        let pick = self.rng.random_range(0..self.initial_states.len());
        self.state.clone_from(&self.initial_states[pick]);
        self.state.restart();
        self.schedule = ActionSchedule::at_rest(self.config.n_jets);
        self.actions_taken = 0;
        self.done = false;
        Ok(self.layout.observe(&self.state))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        if action.len() != self.config.n_jets {
            return Err(EnvError::ActionDim { expected: self.config.n_jets, got: action.len() });
        }
        let previous = std::mem::take(&mut self.schedule.u_new);
        self.schedule.u_prev = previous;
        self.schedule.u_new = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        self.schedule.t_start = self.state.t;

        let mut diverged = false;
        for k in 0..self.layout.substeps {
            let t = self.schedule.t_start + k as f64 * self.config.dt;
            let u = interpolate_action(&self.schedule, t, &self.config);
            self.layout.forcing_into(&u, &mut self.forcing);
            match self.stepper.step(&mut self.state, &self.forcing, &mut self.rng) {
                Ok(()) => {}
                Err(SolverError::Divergence { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.actions_taken += 1;
        let done_reason = if diverged {
            DoneReason::Terminal
        } else if self.actions_taken >= self.config.actions_per_episode {
            DoneReason::TimeOut
        } else {
            DoneReason::Running
        };
        self.done = done_reason.is_done();
        Ok(StepResult {
            observation: self.layout.observe(&self.state),
            reward: self.layout.reward(&self.state),
            done_reason,
        })
    }
}
