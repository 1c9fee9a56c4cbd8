//! Numeric substrate: dense tensors with reverse-mode autodiff, transformer
//! building blocks, the Adam optimizer with linear warmup, the checkpoint
//! container, and a finite-difference gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use tensor::{no_grad, DType, Scalar, Tensor};
