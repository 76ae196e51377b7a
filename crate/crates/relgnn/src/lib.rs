//! Relational graph neural networks over typed directed multigraphs.
//!
//! The crate bundles a minimal reverse-mode autodiff engine, a typed-graph
//! data model, seven relational GNN cell types, task heads and metrics,
//! synthetic dataset generators, and a training harness with early stopping
//! and hyperparameter search.

pub mod error;
pub mod graph;
pub mod layers;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
