//! Laplacian-pyramid-like autoencoder (LPAE) and its companions.
//!
//! - [`tensor`]: rank-4 tensors, deterministic RNG, Xavier init
//! - [`image_io`]: PGM/PPM images, corpora, augmented crop sampling
//! - [`pyramid`]: classical Laplacian pyramid and bicubic resampling
//! - [`nn`]: convolution / transposed convolution / ReLU with manual gradients
//! - [`model`]: the autoencoder, multi-level encode/decode, checkpoints
//! - [`losses`]: autoencoder and super-resolution objectives
//! - [`optim`]: SGD with momentum, Adam, step-decay schedules, config files
//! - [`sr`]: pyramid super-resolution pipeline built on the decoder
//! - [`analysis`]: PSNR, SSIM and the convolutional cost model
//! - [`train`]: training loops with held-out evaluation
//! - [`gradcheck`]: finite-difference checks of every backward pass
//! - [`container`]: CRC-checked binary format for checkpoints and tensors

pub mod analysis;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pyramid;
pub mod sr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor4};
