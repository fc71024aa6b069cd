//! Tape-based reverse-mode differentiation over dense tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::{flip_rows, shift_planes};
pub use tensor::{Real, Tensor};
