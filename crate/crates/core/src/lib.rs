//! Interpretable continuous control trees trained with soft actor-critic.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod crisp;
pub mod deepen;
pub mod envs;
pub mod error;
pub mod icct;
pub mod policy;
pub mod runner;
pub mod sac;
pub mod verify;

pub use error::{Error, Result};
