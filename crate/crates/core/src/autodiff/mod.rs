//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod flops;
pub mod kernels;
mod ops;
mod tape;
pub mod tensor;

pub use flops::FlopCounter;
pub use kernels::Band;
pub use tape::{Grads, MemoryStats, NodeId, NumericGrads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
