//! Minimal numeric core for sparse training.
//!
//! Dense row-major tensors, a compressed-rows sparse format, and a
//! reverse-mode differentiation [`Tape`] covering the handful of operations a
//! plain MLP or CNN needs: (masked) matmul, patch-matrix convolution,
//! depthwise convolution, batch normalization, ReLU and the two losses.
//!
//! Every reduction runs in a fixed order, so a given input produces the same
//! bits on every run.

mod conv;
mod csr;
mod error;
mod gradcheck;
pub mod kernels;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use conv::ConvGeometry;
pub use csr::{csr_matmul, CompressedRows};
pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{cosine_lr, sgd_step, SgdConfig};
pub use scalar::Scalar;
pub use tape::{BatchNormStats, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
