//! Minimal dense-tensor automatic differentiation.

pub mod ops;
mod sgd;
mod tape;
mod tensor;

pub use ops::*;
pub use sgd::{sgd_step, OptimizerState, SgdConfig};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
