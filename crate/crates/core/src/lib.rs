//! Patch-level representation learning for histopathology with a triplet
//! network, plus a few-shot transfer harness that scores the learned
//! embeddings with SVMs.
//!
//! The crate is organised along the pipeline:
//!
//! - [`corpus`]: slide manifests, grid tiling, patch materialization and
//!   labeled patch sets with stratified source/target splits.
//! - [`sampler`]: anchor/neighbor/distant triplet generation, spatial and
//!   label-driven, with an independent validator.
//! - [`nn`]: the convolutional encoders, the triplet and cross-entropy
//!   objectives, Adam and checkpoints.
//! - [`train`]: the training loops.
//! - [`eval`]: stratified portions, SVM grid search, k-fold CV and reports.
//! - [`projector`]: 2-D manifold projection and scatter plots.
//! - [`pipeline`]: run configuration, stage orchestration and provenance.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod nn;
pub mod pipeline;
pub mod projector;
pub mod sampler;
pub mod seed;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
