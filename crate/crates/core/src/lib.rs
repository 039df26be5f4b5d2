//! Bayesian hierarchical model for pooled multi-cohort risk-factor trajectories.
//!
//! Piecewise-linear age trajectories per risk factor, participant and cohort
//! random effects with structured covariance, skew-normal errors, a
//! Gibbs-within-Metropolis sampler with nested R̂, posterior predictive checks
//! and multiple imputation.

pub mod basis;
pub mod config;
pub mod covariance;
pub mod data;
pub mod design;
pub mod draws;
pub mod error;
pub mod impute;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod ppc;
pub mod rhat;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod skewnormal;
pub mod spec;
pub mod state;
pub mod validation;

pub use error::{Error, Result};
