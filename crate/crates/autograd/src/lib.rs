//! Reverse-mode automatic differentiation over dense `NCHW` tensors.
//!
//! Gradients are recorded as ordinary tape operations, so second-order
//! quantities such as input-gradient norms can be differentiated with respect
//! to parameters.

pub mod check;
pub mod conv;
mod error;
pub mod real;
mod tape;
pub mod tensor;

pub use conv::ConvGeom;
pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
