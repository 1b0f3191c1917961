//! Multi-domain conditional GAN training for low-volume image datasets.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense tensors, feed-forward networks with hand-written
//!   backpropagation, Adam, linear learning-rate decay and spectral
//!   normalization.
//! - [`data`]: byte-image datasets, the DFDS file format, synthetic shape
//!   domains, bilinear resizing and class-balanced subsampling.
//! - [`gan`]: projection-conditioned GAN losses and the target-only,
//!   fine-tuned and multi-domain training loops.
//! - [`metrics`]: Fréchet distance, Inception-Score analogue, MS-SSIM,
//!   dataset diversity and the outer-dataset selection score.
//! - [`drs`]: class-conditional discriminator rejection sampling.
//! - [`augment`]: augmented-set construction, conventional transforms and the
//!   downstream classifier evaluation.

pub mod augment;
pub mod classifier;
pub mod data;
pub mod drs;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use nn::{ParamSet, Tensor};
pub use data::{DomainPair, LabeledImageSet};
pub use gan::{GanArch, GanModel, TrainConfig};
