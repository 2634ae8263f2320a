//! Stack trace deduplication engine.
//!
//! The crate is organised around a two-stage pipeline: a bi-LSTM encoder
//! embeds whole stack traces into a vector space where duplicates sit close
//! together, a nearest-neighbour index retrieves candidate reports, and an
//! optional cross-encoder reranker rescores the candidates before the
//! attach-or-open decision is made against a calibrated threshold.
//!
//! Modules:
//! - [`trace`]: report model, frame normalization, dataset parsing, splits
//! - [`tokenizer`]: frame splitting and byte pair encoding
//! - [`nn`]: tensors, reverse-mode autodiff, LSTM/MLP layers, Adam, weight files
//! - [`embedder`]: bi-LSTM trace encoder trained with a contrastive objective
//! - [`index`]: embedding store with exact and graph-based approximate search
//! - [`reranker`]: cross-encoder scorer with frame significance marking
//! - [`baselines`]: TF-IDF scorer, edit-distance scorer, remote embedding client
//! - [`eval`]: chronological replay, ranking metrics, threshold calibration
//! - [`pipeline`]: ready-to-replay pipeline implementations
//! - [`synth`]: synthetic crash corpus generator for benchmarks and tests

pub mod baselines;
pub mod embedder;
mod error;
pub mod eval;
pub mod index;
pub mod nn;
pub mod pipeline;
pub mod reranker;
pub mod synth;
pub mod tokenizer;
pub mod trace;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
