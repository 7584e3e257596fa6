//! Agile quadrotor flight benchmark: a 1 kHz rigid-body simulator, the three
//! action-space abstraction layers (single-rotor thrusts, collective thrust and
//! bodyrates, linear velocity), flatness-based reference generation, an RL
//! environment with PPO training, multiple-shooting MPC baselines, and the
//! experiment harness around them.

pub mod error;
pub mod math;
pub mod dynamics;
pub mod actuation;
pub mod bench;
pub mod config;
pub mod trajgen;
pub mod env;
pub mod mpc;
pub mod policy;

pub use error::{Error, Result};
