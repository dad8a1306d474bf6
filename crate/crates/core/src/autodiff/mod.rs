//! Dense tensors with tape-based reverse-mode differentiation.

pub mod check;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{log_add, log_softmax_row, log_sum_exp};
pub use params::{init_layer_norm, init_linear, Binder, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
