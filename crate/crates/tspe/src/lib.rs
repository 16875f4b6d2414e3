//! Two-stage prefix-enhanced pipeline for narrative video annotation.
//!
//! Stage one (local) watches a single clip: subtitle- and frame-level
//! attention pool the clip into context vectors that are prepended as a
//! soft prefix to a small causal decoder, which writes an event summary.
//! Stage two (global) explains an event: every prior event is enriched
//! with commonsense triples from a small knowledge store, attention pools
//! the enriched history, and a second prefixed decoder writes the reason.
//!
//! Everything runs on the CPU in f64 on top of a hand-rolled autodiff
//! tape, and every run is reproducible from a seed: corpora, training,
//! sampling, and report files are all deterministic.
//!
//! The `examples/` directory is the front door — one runnable example per
//! capability (attention pooling, knowledge enrichment, corpus synthesis,
//! both training stages, metrics, gradient checking, ablations). A thin
//! `tspe` binary exposes the same operations as subcommands for scripting.

pub mod artifacts;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod global;
pub mod kg;
pub mod local;
pub mod metrics;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
