//! Dense tensors, a reverse-mode gradient tape, and a finite-difference checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, relative_error, GradCheckReport, REL_FLOOR};
pub use params::ParamSet;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{bilinear_sample, matmul, matmul_bt, sigmoid, sigmoid_scalar, softmax, Tensor};
