//! U-Net semantic segmentation with channel-wise cross-attention skip
//! connections (CCT + CCA), built on a small reverse-mode tensor core.
//!
//! The crate bundles everything the experiments need: the tensor/autodiff
//! substrate, the pluggable-skip U-Net backbone, the channel transformer, the
//! training stack (combined CE+Dice loss, Adam, flip/rot augmentation),
//! segmentation metrics, synthetic data, binary checkpoints, and the
//! experiment runners that the CLI exposes.

pub mod config;
pub mod crc;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Dtype, Gradients, Graph, Scalar, Tensor, Var};

/// Epsilon used by every normalization in the crate.
pub const NORM_EPS: f64 = 1e-5;
