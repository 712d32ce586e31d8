//! Joint multimodal variational autoencoders.
//!
//! The crate covers the full pipeline for bi-directional generation between
//! two modalities (an image `x` and a label or attribute vector `w`):
//!
//! - [`diffcore`]: dense tensors with a recording tape and reverse-mode gradients.
//! - [`dists`]: diagonal Gaussian, Bernoulli and categorical heads, log-densities and KLs.
//! - [`nets`]: the `D512R-D512R` architecture notation and MLP construction.
//! - [`models`]: VAE, JMVAE, JMVAE-kl, JMVAE-h and CVAE lower bounds.
//! - [`train`]: Adam, KL warm-up, dynamic binarization and checkpoints.
//! - [`infer`]: missing-modality complement, conditional log-likelihood and diagnostics.
//! - [`data`]: IDX/MNIST loading and a synthetic bimodal toy.

pub mod data;
pub mod diffcore;
pub mod dists;
mod error;
pub mod infer;
pub mod models;
pub mod nets;
pub mod seeds;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
