//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! The whole acoustic model is built from the primitives in [`tape`]: matrix
//! multiply, broadcast add, ReLU, row softmax, layer norm, same-padded 1-D
//! convolution, embedding lookup, dropout and fused scaled-dot attention, plus
//! the loss heads. Each primitive records a backward closure on a [`tape::Tape`];
//! [`gradcheck`] verifies every analytic gradient against central finite
//! differences in 64-bit mode.
//!
//! Precision is a type parameter: `f64` for gradient checking, `f32` for
//! training and synthesis.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, Differentiable};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{Parameter, Tensor};
