//! Dataset generation, experiment configuration, training and evaluation
//! runs, timing and ablations.

pub mod ablate;
pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;

pub use error::{HarnessError, Result};
