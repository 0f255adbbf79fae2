//! Multi-scale graph attention + recurrent accident-risk model.
//!
//! The crate bundles everything needed to reproduce the pipeline end to end
//! at desk scale:
//!
//! * [`tensor`] — float64 tensors with a reverse-mode autodiff tape and a
//!   finite-difference gradient checker,
//! * [`graph`] — road-network topology, CSR adjacency, exact k-hop frontiers
//!   and subgraph extraction,
//! * [`nn`] — graph attention, GRU, attention pooling, the external-feature
//!   MLP and the fusion head,
//! * [`model`] — the assembled three-branch network,
//! * [`data`] — ingestion, interpolation, normalization, balanced sampling,
//!   splits and a synthetic dataset generator,
//! * [`train`] — BCE loss, Adam, the training loop, metrics, the ablation
//!   grid and the computational cost estimator,
//! * [`run`] — run configuration, directory layout and the pieces the CLI
//!   is built from.

pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
