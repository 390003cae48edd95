//! Spatial partially-linear-model workbench: estimators, data-generating
//! processes, and bias/coverage diagnostics for exposure-effect estimation
//! under spatial confounding.
//!
//! The library is organized around a handful of building blocks:
//!
//! - [`rng`] / [`geometry`]: seeded replication streams and location sampling
//! - [`kernels`] / [`linalg`]: stationary covariances and dense SPD numerics
//! - [`mercer`]: the analytic Hermite eigensystem of the squared-exponential
//!   kernel under Gaussian sampling, and the eigen-expansion bias functional
//! - [`smoothers`]: low-rank thin-plate bases with GCV penalty selection
//! - [`dgp`]: the four simulation scenarios
//! - [`estimators`] / [`inference`]: effect estimators and their intervals
//! - [`oracles`]: truth-bearing bias functionals and numeric diagnostics
//! - [`harness`] / [`report`]: the replication loop and table emission

pub mod config;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod harness;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod mercer;
pub mod oracles;
pub mod report;
pub mod rng;
pub mod smoothers;
pub mod vecchia;

pub use error::{Error, Result};
