//! Variance-adaptive linear bandits and linear mixture MDPs.

pub mod bandit;
pub mod confidence;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;

pub use error::{Error, Result};
