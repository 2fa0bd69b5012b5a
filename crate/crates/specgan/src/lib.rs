//! Adversarial training testbed for spectrogram generation.
//!
//! The crate builds everything from first principles on a small f64 tensor
//! library with reverse-mode autodiff: weight-normalized convolution layers,
//! a U-Net discriminator that scores mel-spectrograms at coarse and fine
//! resolution in the time-frequency plane, a toy duration-driven spectrogram
//! generator, the least-squares GAN training loop with feature matching, and
//! a RAdam+Lookahead optimizer. A deterministic synthetic corpus and a small
//! CLI (`train`, `heatmap`, `gradcheck`) make the whole pipeline verifiable
//! at desk scale.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod heatmap;
mod kernels;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod spectrogram;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
