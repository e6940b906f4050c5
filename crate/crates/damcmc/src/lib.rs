//! Delayed-acceptance MCMC with reduced forward models.
//!
//! The crate implements two-stage Metropolis-Hastings samplers in which a
//! cheap reduced forward map screens proposals before the exact map is
//! consulted, together with enhanced error models that account for the
//! discrepancy between the two maps. Three desk-scale inverse-problem
//! testbeds (a linear-Gaussian pair, a 1D nonlinear diffusion pair, and a
//! miniature electrical capacitance tomography pair) exercise the samplers
//! end to end.

pub mod config;
pub mod diagnostics;
pub mod eem;
pub mod error;
pub mod models;
pub mod record;
pub mod report;
pub mod runner;
pub mod samplers;
pub mod target;
pub mod types;

pub use error::{Error, Result};
pub use types::{DataVector, ParameterVector};
