//! Marginal-integration estimation of additive regression components from
//! continuously observed, mixing sample paths, with a simulator that has
//! exact ground truth and a Monte Carlo harness for the asymptotic rates.

pub mod additive;
pub mod config;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod kernels;
pub mod pathio;
pub mod process_sim;
pub mod quadrature;
pub mod stats;

pub use error::{Error, Result};
