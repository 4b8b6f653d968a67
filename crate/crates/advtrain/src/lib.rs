//! Adversarial-training workbench for MNIST.
//!
//! The crate bundles everything needed to study the tension between
//! perturbation-based robustness (withstanding small pixel changes that flip
//! the model) and invariance-based robustness (not clinging to a label after
//! the image semantically changed class):
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff, including input
//!   gradients for white-box attacks.
//! - [`model`]: the reference CNN, RMSprop, and binary checkpoints.
//! - [`data`]: MNIST IDX ingestion, batch iteration, label overrides.
//! - [`attack`]: the l-infinity PGD attack and the model-agnostic
//!   invariance-example generator with dual labeling.
//! - [`train`]: standard, adversarial, sequential-retraining and
//!   simultaneous training pipelines.
//! - [`eval`]: clean accuracy, the two robustness metrics, combined
//!   robustness and tradeoff intersections.
//! - [`config`] / [`manifest`]: reproducible experiment configuration.
//!
//! The `advtrain` binary exposes the workflows on the command line; the
//! `book/` directory of the repository walks through the concepts.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
