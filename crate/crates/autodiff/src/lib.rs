//! Reverse-mode automatic differentiation over dense real and complex
//! tensors, restricted to a closed set of ops.

pub mod error;
pub mod fft;
pub mod gradcheck;
mod hvp;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use hvp::{grad, hvp, value_and_grad};
pub use num_complex::Complex64;
pub use tape::{Gradients, PadMode, Tape, Unary, Var};
pub use tensor::{Storage, Tensor};
