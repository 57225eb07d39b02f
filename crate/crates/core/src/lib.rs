//! PPO actor-critic laboratory with activation-balance (OUI) diagnostics.
//!
//! OUI measures, per hidden layer, how evenly each unit splits a fixed probe batch into
//! active and inactive samples. The crate trains small PPO agents on CartPole and a grid
//! room, logs OUI and update statistics across learning-rate sweeps, checks the flip-rate
//! theory numerically, and evaluates early screening rules.

pub mod cli;
pub mod envs;
pub mod error;
pub mod nn;
pub mod oui;
pub mod ppo;
pub mod screening;
pub mod sweep;
pub mod theory;

pub use error::{LabError, Result};
