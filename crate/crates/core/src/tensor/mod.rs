//! Dense tensors, the autodiff tape, and gradient verification.

mod dense;
pub mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use gradcheck::grad_check;
pub use tape::{Tape, Var};

#[cfg(test)]
mod tests;
