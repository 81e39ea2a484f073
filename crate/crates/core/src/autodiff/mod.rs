//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use params::{AdamConfig, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{row_softmax, rows_to_points};
