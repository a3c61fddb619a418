//! Few-shot node classification on citation graphs via episodic meta-learning
//! over GNN classifiers.
//!
//! The crate provides:
//!
//! - a reverse-mode differentiation tape supporting gradients of gradients
//!   ([`tape`]),
//! - sparse adjacency construction, renormalization and feature propagation
//!   ([`graph`]),
//! - differentiable SGC and two-layer GCN classifiers ([`models`]),
//! - class partitioning and episodic task sampling ([`episodes`]),
//! - the meta-learning engine: inner adaptation, meta-update, training loop
//!   and meta-testing ([`meta`]),
//! - a loader for raw `.content`/`.cites` citation files ([`data`]),
//! - and the benchmark driver with CSV/markdown emission ([`bench`]).

pub mod bench;
pub mod data;
pub mod dense;
pub mod episodes;
pub mod error;
pub mod graph;
pub mod meta;
pub mod models;
pub mod tape;

pub use error::{Error, Result};
