//! Binary agent checkpoints: magic `PPOB`, format version 1, little-endian.
//!
//! Layout: magic, version (u32), agent seed (u64), policy version (u64),
//! actor spec, critic spec, actor params, critic params, actor Adam, critic
//! Adam, observation normalizer. Arrays are a u64 length followed by f64s.

use std::path::Path;

use thiserror::Error;

use crate::nn::{Activation, AdamState, BranchSpec, LayerSpec, Network, NetworkSpec};
use crate::policy::{Agent, PolicyVersion, PpoConfig};
use crate::rollout::RunningNormalizer;

pub const MAGIC: &[u8; 4] = b"PPOB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn array(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn layer(&mut self, l: &LayerSpec) {
        self.u64(l.width as u64);
        self.u8(l.activation.code());
    }
    fn spec(&mut self, s: &NetworkSpec) {
        self.u64(s.input_dim as u64);
        self.u64(s.trunk.len() as u64);
        s.trunk.iter().for_each(|l| self.layer(l));
        self.u64(s.branches.len() as u64);
        for b in &s.branches {
            self.u64(b.hidden.len() as u64);
            b.hidden.iter().for_each(|l| self.layer(l));
            self.u64(b.out_dim as u64);
            self.u8(b.head.code());
            self.f64(b.head_gain);
        }
    }
    fn adam(&mut self, a: &AdamState) {
        self.u64(a.t);
        self.f64(a.lr);
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.array(&a.m);
        self.array(&a.v);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            CheckpointError::Format(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Format("length overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn array(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.usize()?;
        if n > (self.data.len() - self.pos) / 8 {
            return Err(CheckpointError::Format(format!("array of {n} values exceeds the file")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn activation(&mut self) -> Result<Activation, CheckpointError> {
        let code = self.u8()?;
        Activation::from_code(code).ok_or_else(|| CheckpointError::Format(format!("unknown activation code {code}")))
    }
    fn layer(&mut self) -> Result<LayerSpec, CheckpointError> {
        Ok(LayerSpec { width: self.usize()?, activation: self.activation()? })
    }
    fn count(&mut self) -> Result<usize, CheckpointError> {
        let n = self.usize()?;
        if n > 1024 {
            return Err(CheckpointError::Format(format!("implausible layer count {n}")));
        }
        Ok(n)
    }
    fn spec(&mut self) -> Result<NetworkSpec, CheckpointError> {
        let input_dim = self.usize()?;
        let trunk = (0..self.count()?).map(|_| self.layer()).collect::<Result<_, _>>()?;
        let mut branches = Vec::new();
        for _ in 0..self.count()? {
            let hidden = (0..self.count()?).map(|_| self.layer()).collect::<Result<_, _>>()?;
            branches.push(BranchSpec { hidden, out_dim: self.usize()?, head: self.activation()?, head_gain: self.f64()? });
        }
        Ok(NetworkSpec { input_dim, trunk, branches })
    }
    fn adam(&mut self) -> Result<AdamState, CheckpointError> {
        Ok(AdamState {
            t: self.u64()?,
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
            m: self.array()?,
            v: self.array()?,
        })
    }
}

pub fn encode(agent: &Agent) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(agent.seed);
    w.u64(agent.version.0);
    w.spec(agent.actor.spec());
    w.spec(agent.critic.spec());
    w.array(agent.actor.params());
    w.array(agent.critic.params());
    w.adam(&agent.actor_adam);
    w.adam(&agent.critic_adam);
    w.u64(agent.normalizer.count);
    w.array(&agent.normalizer.mean);
    w.array(&agent.normalizer.m2);
    w.0
}

/// Rebuilds an agent; `config` supplies the PPO settings, which are not
/// stored (learning rates live in the Adam states).
pub fn decode(data: &[u8], config: PpoConfig) -> Result<Agent, CheckpointError> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic (expected PPOB)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported format version {version}")));
    }
    let seed = r.u64()?;
    let policy_version = PolicyVersion(r.u64()?);
    let actor_spec = r.spec()?;
    let critic_spec = r.spec()?;
    let fmt = |e: crate::nn::NnError| CheckpointError::Format(e.to_string());
    let actor = Network::from_params(actor_spec, r.array()?).map_err(fmt)?;
    let critic = Network::from_params(critic_spec, r.array()?).map_err(fmt)?;
    let actor_adam = r.adam()?;
    let critic_adam = r.adam()?;
    let normalizer = RunningNormalizer { count: r.u64()?, mean: r.array()?, m2: r.array()? };
    if r.pos != data.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", data.len() - r.pos)));
    }
    if actor_adam.m.len() != actor.param_count()
        || actor_adam.v.len() != actor.param_count()
        || critic_adam.m.len() != critic.param_count()
        || critic_adam.v.len() != critic.param_count()
    {
        return Err(CheckpointError::Format("optimizer state does not match the networks".into()));
    }
    if normalizer.mean.len() != actor.spec().input_dim || normalizer.m2.len() != actor.spec().input_dim {
        return Err(CheckpointError::Format("normalizer dimension does not match the actor input".into()));
    }
    if actor.params().iter().chain(critic.params()).any(|v| !v.is_finite()) {
        return Err(CheckpointError::Format("non-finite network parameter".into()));
    }
    Ok(Agent { actor, critic, actor_adam, critic_adam, normalizer, version: policy_version, config, seed })
}

pub fn save(agent: &Agent, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(agent)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path, config: PpoConfig) -> Result<Agent, CheckpointError> {
    let data = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&data, config)
}
