//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_with_fault, finite_diff_check, GradCheck};
pub use tape::{Fault, Gradients, Tape, Var};
pub use tensor::Tensor;
