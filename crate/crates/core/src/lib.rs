//! Desk-scale laboratory for locate-then-edit memory editing.
//!
//! The crate trains a small deterministic transformer on synthetic facts,
//! rewrites selected facts through a closed-form least-squares update of the
//! MLP output projections, and measures how well each individual fact
//! survives the joint update. Two editing pipelines are provided: a plain
//! residual-optimization baseline and an alignment-regularized variant that
//! keeps the geometry of residual embeddings consistent with the geometry of
//! key embeddings while facts are optimized one after another.
//!
//! Everything here is pure computation over `alloc` collections; file
//! formats, experiment drivers, and the CLI live in the companion `std`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod dataset;
pub mod editor;
pub mod fmath;
pub mod memory_model;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod toy_lm;

pub use memory_model::FactTriple;
pub use numerics::DenseMatrix;
pub use toy_lm::{ToyModel, ToyModelConfig};
