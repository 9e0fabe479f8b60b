//! Dense `f64` tensors, a reverse-mode tape, the layers built on it, and a
//! finite-difference oracle for checking gradients.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_grad, max_relative_error, DEFAULT_EPS};
pub use layers::{gru_cell, linear, multi_head_attention, AttentionVars, GruVars};
pub use optim::Adam;
pub use params::{GradientMap, ParamSet};
pub use tape::{Bindings, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Elementwise logistic function.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.sigmoid()
}

/// Softmax of a non-empty vector (row-wise for matrices).
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    x.softmax()
}
