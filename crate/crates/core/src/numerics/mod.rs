//! Dense tensors, the recording tape, and the primitive operators.

pub mod gradcheck;
pub mod ops;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use ops::Padding;
pub use rng::PortableRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Scalar;
pub use tensor::Tensor;
