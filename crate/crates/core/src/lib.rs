//! Gated channel transformation (GCT) inside a small from-scratch CNN stack.
//!
//! The crate provides NCHW tensors and convolution kernels, the GCT layer
//! with exact gradients and its ablation variants, a handful of standard
//! layers (conv, batch norm, ReLU, pooling, linear, squeeze-and-excitation),
//! momentum SGD with a warmup/step schedule, dataset readers, checkpoints,
//! and the gate-weight / variance-ratio / cost analyses.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gct;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor4};
