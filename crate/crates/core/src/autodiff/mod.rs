//! Minimal dense-tensor engine with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use tape::{CustomVjp, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
