//! Tensor arithmetic and reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::Real;
pub use params::{Bound, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
