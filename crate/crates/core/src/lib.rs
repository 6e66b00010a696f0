//! Variational classifier with a linear latent-space head.
//!
//! The model couples a residual convolutional VAE with a linear classifier on
//! the latent code. Rows of the classifier weight matrix are latent-space
//! directions aligned with binary image attributes; one extra "fake" logit
//! lets the encoder and classifier act as the adversary of the decoder during
//! introspective training.
//!
//! Module map:
//!
//! - [`distributions`]: diagonal Gaussian posteriors, KL to the prior, sampling.
//! - [`model`]: encoder, decoder, classifier head and checkpoints.
//! - [`losses`]: ELBO terms and the four adversarial losses.
//! - [`trainer`]: the two-phase alternating optimization loop.
//! - [`latent_ops`]: attribute manipulation, prior generation, Langevin sampling.
//! - [`eval`]: Fréchet distance with pluggable embedders, accuracy.
//! - [`data`]: CelebA-format ingestion and the synthetic face dataset.

pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod latent_ops;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
