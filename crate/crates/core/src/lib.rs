//! Consensus of dependent Gaussian experts and the multimodal VAE objective
//! built on it.
//!
//! The crate is organised bottom-up:
//!
//! * [`gaussian`]: diagonal Gaussians, modality subsets, the expert correlation.
//! * [`consensus`]: dependent-expert aggregation, product/mixture baselines,
//!   closed forms for two experts and a dense reference implementation.
//! * [`autodiff`]: a reverse-mode tape, MLPs, Adam and checkpoints.
//! * [`elbo`]: the subset-weighted objective and its building blocks.
//! * [`data`]: synthetic multimodal datasets and their file format.
//! * [`model`], [`trainer`], [`grid`]: the VAE, minibatch training and
//!   hyperparameter sweeps.
//! * [`eval`]: subset ELBOs, latent classifiers, weight/uncertainty reports
//!   and ablations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod consensus;
pub mod data;
pub mod elbo;
mod error;
pub mod eval;
pub mod gaussian;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use gaussian::{enumerate_subsets, trace_of_diagonal, CorrelationSpec, DiagonalGaussian, SubsetMask};
