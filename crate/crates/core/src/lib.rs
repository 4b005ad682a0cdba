//! Latent-space neural cellular automata for image restoration.
//!
//! The crate bundles a minimal differentiable tensor engine, an
//! autoencoder with a latent cellular-automaton core (attention-based and
//! gate-based transition variants), synthetic corruption generators, the
//! two-phase training pipeline, SSIM/PSNR evaluation, and an instrumented
//! efficiency benchmark harness.

pub mod ae;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corrupt;
pub mod dataset;
pub mod error;
pub mod image;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod nca;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageBatch;
pub use tensor::{Tensor, TensorError};
