//! Dense tensors, reverse-mode differentiation and the Adam optimizer.
//!
//! The operator set is deliberately small: convolution, nearest upsampling,
//! group normalization, SiLU, dense layers, spatial self-attention,
//! elementwise add/sub/mul, channel concatenation and sum/mean reductions.
//! Everything is generic over [`Scalar`] so the same network can be evaluated
//! in `f64` for finite-difference gradient checks.

mod adam;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
