//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operations the denoiser, rectifier, probe and losses need are
//! provided. Broadcasting is limited to equal shapes and one-element operands.

mod kernels;
mod tape;
mod tensor;

pub use tape::{separable_product, Tape, Var};
pub use tensor::Tensor;
