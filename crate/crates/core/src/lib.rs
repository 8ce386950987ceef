//! Central difference convolution networks for face anti-spoofing.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`ops`], [`autograd`], [`gradcheck`]: dense NCHW tensors and
//!   a tape-based reverse-mode autodiff engine.
//! - [`cdc`]: vanilla, central-difference and θ-blended convolutions.
//! - [`losses`]: MSE and contrastive depth loss for pixel-wise supervision.
//! - [`models`]: single-modal and multi-modal CDC networks.
//! - [`metrics`]: APCER / BPCER / ACER and sub-protocol aggregation.
//! - [`data`]: on-disk datasets, mask generation and a synthetic generator.
//! - [`train`]: Adam training, evaluation and checkpoints.

pub mod autograd;
pub mod data;
pub mod cdc;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
