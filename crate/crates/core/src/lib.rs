//! Scattering transform, differentiable synthesizers, encoder, path-wise
//! optimizers and θ-importance sampling.

pub mod encoder;
pub mod error;
pub mod optimizer;
pub mod scattering;
pub mod synths;
pub mod theta_is;

pub use error::{CoreError, Result};
