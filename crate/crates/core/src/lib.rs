//! Label distribution learning with a label correlation grid.
//!
//! This crate trains a single-hidden-layer network to predict label
//! distributions (rows of per-label probabilities that sum to one) and
//! regularizes it with two extra loss terms: a noisy grid built from the
//! label covariance matrix, and an L1 penalty between a low-dimensional
//! projection of the predictions and kernel-PCA projections of the true
//! labels. Training, evaluation, repeated k-fold cross-validation, the
//! ablation and label-noise experiments, and a finite-difference gradient
//! checker are exposed both as a library and through the `ldlgrid` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod lcg;
pub mod ldp;
pub mod metrics;
pub mod net;

pub use error::{Error, Result};
