//! Capsule networks with dynamic routing-by-agreement, the sparsifying
//! primary-capsule activations (CI-squash and Powered Activation), and the
//! instrumentation used to study how strongly each primary capsule drives
//! the layer above it.

pub mod activations;
pub mod analysis;
pub mod autodiff;
pub mod capsule;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod tensor;
pub mod training;

pub use activations::ActivationFn;
pub use autodiff::{Gradients, MarginLossParams, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
