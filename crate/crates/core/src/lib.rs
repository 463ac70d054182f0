//! Robust stochastic gradient Langevin dynamics for Wasserstein-penalised
//! distributionally robust optimisation.

pub mod constants;
pub mod error;
pub mod experiment;
pub mod golden;
pub mod grid;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod penalty;
pub mod sgld;
pub mod verify;

pub use error::{Error, Result};
