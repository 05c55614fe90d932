//! Unsupervised gait recognition on synthetic silhouette sequences.
//!
//! The crate covers the full workflow: procedural dataset generation,
//! a set-pooling part encoder with analytic gradients, KNN + map-equation
//! pseudo-labeling, cluster-level contrastive training against a momentum
//! memory bank, selective cluster/sample fusion, and a gallery/probe
//! evaluation harness. The `gaitsf` binary exposes each stage as a
//! subcommand.

pub mod cluster;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod math;
pub mod memory;
pub mod pipeline;
pub mod rngstream;
pub mod silhouette;

pub use error::{Error, Result};
