//! Switching inverse reinforcement learning for discrete state-action
//! trajectories: hidden-mode MDP types, soft-Q policy solving, forward-backward
//! mode inference, EM training with the I/S model taxonomy, a simulated
//! gridworld benchmark, ARHMM baselines, and the evaluation suite.

pub mod baselines;
pub mod em;
pub mod env;
pub mod error;
pub mod eval;
pub mod inference;
pub mod math;
pub mod model;
pub mod softq;

pub use error::{Result, SwirlError};
