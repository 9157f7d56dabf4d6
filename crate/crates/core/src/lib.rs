//! Core library for planning-token reasoning experiments: synthetic corpus
//! generation, tokenization and annotation, plan inference (heuristic,
//! k-means, variational), a from-scratch trainable transformer, and the
//! evaluation/analysis suite.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod planner;
pub mod train;
pub mod tokenizer;

pub use error::{Error, Result};
