//! Dense `f64` tensors, reverse-mode differentiation, and the small amount of
//! symmetric linear algebra the rest of the crate needs.

pub mod gradcheck;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{softmax_cross_entropy, Gradients, Tape, Var};
pub use tensor::Tensor;
