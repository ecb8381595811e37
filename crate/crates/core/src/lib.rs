//! IFGNet: implicit spatial-frequency fusion of hyperspectral and LiDAR
//! patches via Kolmogorov-Arnold layers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense array substrate, seeded RNG, Adam update rule
//! - [`spline`] — B-spline bases (Cox-de Boor) and their derivatives
//! - [`kan`] — Kolmogorov-Arnold layers with analytic forward/backward
//! - [`encoders`] — modality-specific KAN encoders into the latent space
//! - [`spatial`] — LiDAR-guided spatial implicit aggregation (SIAU)
//! - [`frequency`] — DFT / implicit aggregation over frequency components
//! - [`model`] — full network assembly, loss, checkpointing
//! - [`data`] — cube/label IO, patch extraction, splits, synthetic scenes
//! - [`metrics`] — confusion matrix, OA / AA / Cohen's kappa
//! - [`train`] — mini-batch Adam training loop and evaluation
//! - [`gradcheck`] — finite-difference verification of every backward pass

pub mod data;
pub mod encoders;
pub mod error;
pub mod frequency;
pub mod gradcheck;
pub mod kan;
pub mod metrics;
pub mod model;
pub mod spatial;
pub mod spline;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;

pub use error::{IfgError, Result};
pub use model::{HeadMode, IfgNet, IfgNetConfig, Variant};
pub use tensor::{DenseTensor, Parameter, Rng};
