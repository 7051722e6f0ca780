//! Dense `f64` tensors and a reverse-mode tape.

mod dense;
mod gemm;
pub mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use tape::{focal_positive, logit, sigmoid, softplus, Tape, Var, PAD};
