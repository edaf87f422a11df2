//! PPO training stack with end-of-episode (EOE) and partial-trajectory (PT)
//! return bootstrapping, so that parallel transition collection keeps every
//! agent update on-policy regardless of the number of environments.
//!
//! The crate ships a native falling-film (Shkadov) control environment, a
//! pendulum swing-up benchmark and a small dense-network substrate with
//! hand-written reverse-mode gradients.

pub mod solver;
pub mod trainer;
pub mod collector;
pub mod env;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod rollout;
