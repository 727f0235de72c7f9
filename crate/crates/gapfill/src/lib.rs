//! Imputation toolkit for optical satellite image time series.
//!
//! A masked multi-spectral input sequence goes in, a gap-free sequence of the
//! same shape comes out. The crate bundles everything needed to run that
//! experiment end to end on a single machine:
//!
//! - [`datamodel`]: the sequence tensors, the on-disk container format and the
//!   reflectance normalization contract,
//! - [`gapsim`]: cloud filtering, synthetic gap injection and a procedural
//!   scene generator for desk-scale verification,
//! - [`model`]: the sequence-to-sequence network — a convolutional U-Net over
//!   space with multi-head self-attention along time,
//! - [`train`]: masked-L1 training with Adam, augmentation and early stopping,
//! - [`infer`]: one-shot and sliding-window full-sequence imputation,
//! - [`baselines`]: the non-learned per-pixel temporal baselines,
//! - [`metrics`]: MAE/RMSE/SAM/PSNR/SSIM restricted to the imputed domain.

pub mod baselines;
pub mod datamodel;
pub mod error;
pub mod gapsim;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
