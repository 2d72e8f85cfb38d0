//! Iterative per-class uncertainty quantification for continual open-world
//! learning over precomputed feature vectors.
//!
//! The crate is organized bottom-up:
//!
//! - [`featstore`]: feature files, task streams, synthetic data.
//! - [`subspace`]: per-class PCA subspaces and the feature reconstruction
//!   error (FRE) score.
//! - [`mapper`]: the novelty mapper that assigns novel-class ids
//!   (k-means or a shallow network).
//! - [`selection`]: active-labeling strategies, the simulated oracle and the
//!   budget ledger.
//! - [`engine`]: the per-task iterative scoring loop.
//! - [`learner`]: the replay-based continual classifier and its
//!   decision-boundary uncertainty scores.
//! - [`baselines`]: one-shot and single-novel-class subspace detectors.
//! - [`evalkit`]: AUROC, continual accuracy and report emission.
//! - [`checkpoint`]: binary blocks for subspaces, mappers and classifiers.

pub mod baselines;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod featstore;
pub mod learner;
pub mod mapper;
pub mod nn;
pub mod seeds;
pub mod selection;
pub mod subspace;

/// Unique sample identifier.
pub type RecordId = u64;

/// Class identifier. Ground-truth classes and classes discovered without
/// supervision share this id space; discovered ids come from a counter that
/// starts above every ground-truth id.
pub type ClassId = i32;

pub use error::{Error, Result};
