//! Tensors, kernels and reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, noise_floor, relative_error, CheckOptions, GradCheckReport};
pub use kernels::{cross_entropy, gelu, layer_norm, matmul, matmul_t, sigmoid, softmax, standardize};
pub use tape::{Gradients, RowGroups, Tape, Var};
pub use tensor::Tensor;

/// Epsilon shared by every LayerNorm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;
