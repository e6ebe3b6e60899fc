//! Lattice Markov chain approximations of stable-like processes whose jumps
//! run only along the coordinate axes.
//!
//! The crate samples the chains, computes exact transition densities on
//! finite windows, and checks heat-kernel, exit-time and regularity estimates
//! against those exact values, Monte Carlo, and a closed-form stable oracle.

pub mod bound_checks;
pub mod chain_sim;
pub mod config;
pub mod convergence_lab;
pub mod error;
pub mod kernel_model;
pub mod lattice_generator;
pub mod numerics;
pub mod rng;
pub mod runner;
pub mod stable_oracle;

pub use error::{Error, Result};
pub use kernel_model::{AxisJump, LatticeSite, ModelSpec, Symbol};
pub use rng::RngStream;
