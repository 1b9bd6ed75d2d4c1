//! Activation-function stress-testing lab for normalization-free networks.
//!
//! The crate bundles a small reverse-mode autodiff engine, the ZC-Swish
//! activation with ReLU/GELU/Swish baselines, BN-free PlainNet models, a
//! CIFAR-100 training harness and layer-wise mean-shift diagnostics.

pub mod activations;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod plainnet;
pub mod probes;
pub mod trainer;

pub use activations::{ActivationKind, ZcSwishParams};
pub use autodiff::{Scalar, Tape, Tensor, Var};
pub use error::{Error, Result};
