//! Simulation and surrogate-based control of a countercurrent uranium
//! extraction-scrubbing cascade.
//!
//! The plant is a 16-stage mixer-settler DAE ([`model`], [`dae`]). A learned
//! one-step predictor ([`surrogate`]) drives a moving-horizon estimator of
//! the fresh-solvent flow ([`mhe`]) and a predictive controller of the
//! feed flow ([`nmpc`]), both solved by particle swarm ([`pso`]).
//! [`scenario`] closes the loop and [`pipeline`] trains the predictor.

pub mod config;
pub mod dae;
pub mod error;
pub mod mhe;
pub mod model;
pub mod nmpc;
pub mod pipeline;
pub mod pso;
pub mod scenario;
pub mod surrogate;

pub use config::Config;
pub use error::{Error, Result};
