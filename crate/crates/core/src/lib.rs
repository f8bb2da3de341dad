//! Region-based 3D U-Net brain tumour segmentation.
//!
//! The crate covers the whole pipeline: NIfTI ingestion, foreground
//! cropping and normalisation, training-time augmentation, a configurable
//! U-Net family (plain, residual and attention-gated, with optional deep
//! supervision), Dice + BCE/Focal region losses, the warmup/cosine training
//! schedule with k-fold cross-validation, sliding-window inference with
//! Gaussian blending and flip test-time augmentation, threshold-based
//! post-processing, and Dice reporting.

pub mod augment;
pub mod autograd;
pub mod config;
pub mod error;
pub mod harness;
pub mod inference;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod postprocess;
pub mod preprocess;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod volume_io;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape3, Tensor};
