//! Few-shot image classification with semantically proportional patch mixing.
//!
//! The crate is organised bottom-up:
//!
//! - [`image`] and [`rng`]: the dense image tensor and the seeded random stream
//!   every stochastic routine draws from.
//! - [`mixkit`]: patch-grid masks, pixel blending, label combination and the
//!   mixers (`seppmix`, `patchmix`, `mixup`, `cutmix`).
//! - [`cam`]: class activation maps and semantic information maps.
//! - [`rotation`]: right-angle rotations and their 4-way targets.
//! - [`nn`]: a small convolutional backbone with hand-written backprop in `f64`.
//! - [`nettrain`]: losses, the bootstrap pretraining stage and the mixed
//!   training loop.
//! - [`fewshot`]: episode sampling, frozen embeddings, the logistic-regression
//!   probe and accuracy aggregation.
//! - [`datakit`]: image-folder ingestion, split manifests and a synthetic
//!   dataset generator.
//! - [`cli`]: the batch driver behind the `seppmix` binary.

pub mod cam;
pub mod checkpoint;
pub mod cli;
pub mod datakit;
pub mod error;
pub mod fewshot;
pub mod image;
pub mod mixkit;
pub mod nettrain;
pub mod nn;
pub mod rng;
pub mod rotation;

pub use error::{Error, Result};
pub use image::Image;
pub use rng::SeededRng;
