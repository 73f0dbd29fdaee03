//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live on a [`Tape`]; each op records its output and a backward rule.
//! [`Tape::backward`] sweeps the tape once in reverse and returns the
//! gradients of every leaf reachable from a scalar loss.

mod element;
mod error;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error};
pub use ops::conv::BatchNormState;
pub use ops::elementwise::{gelu, gelu_grad};
pub use ops::nn::Mode;
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
