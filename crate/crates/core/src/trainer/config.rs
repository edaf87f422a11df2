//! Run configuration as flat `key = value` text in `[section]` blocks.
//!
//! Every key has a default, unknown sections and keys are errors, and the
//! serialized form of a parsed file is canonical (fixed order, shortest
//! round-trip float formatting).

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::collector::CollectMode;
use crate::env::{PendulumConfig, ShkadovEnvConfig};
use crate::policy::PpoConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key '{key}' in section [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Shkadov,
    Pendulum,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Shkadov => "shkadov",
            EnvKind::Pendulum => "pendulum",
        }
    }
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shkadov" => Ok(EnvKind::Shkadov),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(format!("unknown environment '{other}' (expected shkadov or pendulum)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub run_id: String,
    pub out_dir: PathBuf,
    pub total_transitions: usize,
    /// Updates between checkpoints; a final checkpoint is always written.
    pub checkpoint_every: usize,
    pub mode: CollectMode,
    pub n_env: usize,
    pub n_update: usize,
    pub ppo: PpoConfig,
    pub shkadov: ShkadovEnvConfig,
    pub pendulum: PendulumConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Shkadov,
            seed: 0,
            run_id: "run".into(),
            out_dir: PathBuf::from("runs"),
            total_transitions: 200_000,
            checkpoint_every: 10,
            mode: CollectMode::EoePt,
            n_env: 8,
            n_update: 8,
            ppo: PpoConfig::default(),
            shkadov: ShkadovEnvConfig::default(),
            pendulum: PendulumConfig::default(),
        }
    }
}

fn parse<T: FromStr>(value: &str, line: usize, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Parse { line, message: format!("{key}: {e}") })
}

impl RunConfig {
    pub fn episode_length(&self) -> usize {
        match self.env {
            EnvKind::Shkadov => self.shkadov.actions_per_episode,
            EnvKind::Pendulum => self.pendulum.episode_length,
        }
    }

    fn sections(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let p = &self.ppo;
        let s = &self.shkadov;
        let d = &self.pendulum;
        vec![
            (
                "run",
                vec![
                    ("env", self.env.as_str().to_string()),
                    ("seed", self.seed.to_string()),
                    ("run_id", self.run_id.clone()),
                    ("out_dir", self.out_dir.display().to_string()),
                    ("total_transitions", self.total_transitions.to_string()),
                    ("checkpoint_every", self.checkpoint_every.to_string()),
                ],
            ),
            (
                "collector",
                vec![
                    ("mode", self.mode.as_str().to_string()),
                    ("n_env", self.n_env.to_string()),
                    ("n_update", self.n_update.to_string()),
                ],
            ),
            (
                "ppo",
                vec![
                    ("clip_eps", p.clip_eps.to_string()),
                    ("entropy_coef", p.entropy_coef.to_string()),
                    ("gamma", p.gamma.to_string()),
                    ("gae_lambda", p.gae_lambda.to_string()),
                    ("epochs", p.epochs.to_string()),
                    ("minibatch_size", p.minibatch_size.to_string()),
                    ("actor_lr", p.actor_lr.to_string()),
                    ("critic_lr", p.critic_lr.to_string()),
                    ("grad_clip", p.grad_clip.to_string()),
                ],
            ),
            (
                "shkadov",
                vec![
                    ("n_jets", s.n_jets.to_string()),
                    ("x0", s.x0.to_string()),
                    ("jet_spacing", s.jet_spacing.to_string()),
                    ("base_length", s.base_length.to_string()),
                    ("jet_width", s.jet_width.to_string()),
                    ("amplitude", s.amplitude.to_string()),
                    ("obs_length", s.obs_length.to_string()),
                    ("reward_length", s.reward_length.to_string()),
                    ("dt_int", s.dt_int.to_string()),
                    ("dt_const", s.dt_const.to_string()),
                    ("actions_per_episode", s.actions_per_episode.to_string()),
                    ("delta", s.delta.to_string()),
                    ("dt", s.dt.to_string()),
                    ("eps", s.eps.to_string()),
                    ("dx", s.dx.to_string()),
                    ("init_state_dir", s.init_state_dir.display().to_string()),
                    ("init_t_min", s.init_t_min.to_string()),
                    ("init_t_max", s.init_t_max.to_string()),
                ],
            ),
            (
                "pendulum",
                vec![
                    ("max_speed", d.max_speed.to_string()),
                    ("max_torque", d.max_torque.to_string()),
                    ("dt", d.dt.to_string()),
                    ("gravity", d.gravity.to_string()),
                    ("mass", d.mass.to_string()),
                    ("length", d.length.to_string()),
                    ("episode_length", d.episode_length.to_string()),
                ],
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (name, entries)) in self.sections().into_iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            writeln!(out, "[{name}]").expect("writing to a String cannot fail");
            for (key, value) in entries {
                writeln!(out, "{key} = {value}").expect("writing to a String cannot fail");
            }
        }
        out
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let unknown = || ConfigError::UnknownKey { line, section: section.to_string(), key: key.to_string() };
        match section {
            "run" => match key {
                "env" => self.env = value.parse().map_err(|message| ConfigError::Parse { line, message })?,
                "seed" => self.seed = parse(value, line, key)?,
                "run_id" => self.run_id = value.to_string(),
                "out_dir" => self.out_dir = PathBuf::from(value),
                "total_transitions" => self.total_transitions = parse(value, line, key)?,
                "checkpoint_every" => self.checkpoint_every = parse(value, line, key)?,
                _ => return Err(unknown()),
            },
            "collector" => match key {
                "mode" => self.mode = parse(value, line, key)?,
                "n_env" => self.n_env = parse(value, line, key)?,
                "n_update" => self.n_update = parse(value, line, key)?,
                _ => return Err(unknown()),
            },
            "ppo" => {
                let p = &mut self.ppo;
                match key {
                    "clip_eps" => p.clip_eps = parse(value, line, key)?,
                    "entropy_coef" => p.entropy_coef = parse(value, line, key)?,
                    "gamma" => p.gamma = parse(value, line, key)?,
                    "gae_lambda" => p.gae_lambda = parse(value, line, key)?,
                    "epochs" => p.epochs = parse(value, line, key)?,
                    "minibatch_size" => p.minibatch_size = parse(value, line, key)?,
                    "actor_lr" => p.actor_lr = parse(value, line, key)?,
                    "critic_lr" => p.critic_lr = parse(value, line, key)?,
                    "grad_clip" => p.grad_clip = parse(value, line, key)?,
                    _ => return Err(unknown()),
                }
            }
            "shkadov" => {
                let s = &mut self.shkadov;
                match key {
                    "n_jets" => s.n_jets = parse(value, line, key)?,
                    "x0" => s.x0 = parse(value, line, key)?,
                    "jet_spacing" => s.jet_spacing = parse(value, line, key)?,
                    "base_length" => s.base_length = parse(value, line, key)?,
                    "jet_width" => s.jet_width = parse(value, line, key)?,
                    "amplitude" => s.amplitude = parse(value, line, key)?,
                    "obs_length" => s.obs_length = parse(value, line, key)?,
                    "reward_length" => s.reward_length = parse(value, line, key)?,
                    "dt_int" => s.dt_int = parse(value, line, key)?,
                    "dt_const" => s.dt_const = parse(value, line, key)?,
                    "actions_per_episode" => s.actions_per_episode = parse(value, line, key)?,
                    "delta" => s.delta = parse(value, line, key)?,
                    "dt" => s.dt = parse(value, line, key)?,
                    "eps" => s.eps = parse(value, line, key)?,
                    "dx" => s.dx = parse(value, line, key)?,
                    "init_state_dir" => s.init_state_dir = PathBuf::from(value),
                    "init_t_min" => s.init_t_min = parse(value, line, key)?,
                    "init_t_max" => s.init_t_max = parse(value, line, key)?,
                    _ => return Err(unknown()),
                }
            }
            "pendulum" => {
                let d = &mut self.pendulum;
                match key {
                    "max_speed" => d.max_speed = parse(value, line, key)?,
                    "max_torque" => d.max_torque = parse(value, line, key)?,
                    "dt" => d.dt = parse(value, line, key)?,
                    "gravity" => d.gravity = parse(value, line, key)?,
                    "mass" => d.mass = parse(value, line, key)?,
                    "length" => d.length = parse(value, line, key)?,
                    "episode_length" => d.episode_length = parse(value, line, key)?,
                    _ => return Err(unknown()),
                }
            }
            _ => unreachable!("sections are checked when their header is read"),
        }
        Ok(())
    }

    /// Parses config text over the defaults. `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        const SECTIONS: [&str; 5] = ["run", "collector", "ppo", "shkadov", "pendulum"];
        let mut config = Self::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::UnknownSection { line, section: name.to_string() });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, message: format!("expected 'key = value', got '{trimmed}'") })?;
            let sec = section
                .as_deref()
                .ok_or_else(|| ConfigError::Parse { line, message: "key outside of any [section]".into() })?;
            config.set(sec, key.trim(), value.trim(), line)?;
        }
        Ok(config)
    }

    /// Checks cross-field constraints that the individual modules do not.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n_env == 0 || self.n_update == 0 {
            return Err(ConfigError::Invalid("n_env and n_update must be positive".into()));
        }
        if self.total_transitions < self.n_update * self.episode_length() {
            return Err(ConfigError::Invalid(format!(
                "total_transitions {} is below one update ({} transitions)",
                self.total_transitions,
                self.n_update * self.episode_length()
            )));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(ConfigError::Invalid("run_id must be a non-empty plain name".into()));
        }
        Ok(())
    }
}
