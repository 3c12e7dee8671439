//! Hierarchy-aware classification toolkit.
//!
//! The crate trains small multi-level classifiers whose labels live on a
//! tree, measures how far their mistakes land from the truth, and learns
//! per-level class-difference matrices that shape both the decision rule
//! and the training targets. Everything runs on a self-contained
//! reverse-mode tape over dense `f64` tensors; no external numerics are
//! involved, so runs are reproducible bit for bit from a seed.
//!
//! Module map, bottom up:
//!
//! - [`hierarchy`]: label trees, LCA distances, fingerprints.
//! - [`diffcore`]: tensors, the op tape, gradients, finite-difference
//!   checking.
//! - [`model`]: encoders plus chained or parallel classifier heads.
//! - [`cost`]: learnable difference matrices, cost-aware decisions,
//!   label smoothing.
//! - [`objective`]: level weighting and the combined loss.
//! - [`metrics`]: top-1, mistake severity, top-k tree distance,
//!   histograms.
//! - [`data`]: synthetic hierarchical Gaussian datasets and their file
//!   format.
//! - [`train`]: SGD loop, checkpoints, evaluation, ablation grids.
//! - [`cli`]: the `hiergrain` binary's subcommands.

pub mod cli;
pub mod cost;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod train;

pub use error::{Error, Result};
