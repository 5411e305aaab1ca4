//! Rank-dependent peer effects: network generation, equilibrium solving,
//! instrumented estimation, misspecification weights and Monte Carlo designs.

pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod graph;
pub mod mc;
pub mod misspec;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
