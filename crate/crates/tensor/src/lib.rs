//! Dense `f64` tensors with eager, tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced while building a graph; ops return
//! lightweight [`Var`] handles. Gradients are first-order only.

mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
