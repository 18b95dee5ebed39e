//! Desk-scale end-to-end spoken language understanding.
//!
//! The pipeline transcribes synthetic acoustic features into wordpiece
//! posteriors (the acoustic component), bridges those posteriors into token
//! embeddings through one of three differentiable embedders, and decodes an
//! intent plus slot tags from the embedded sequence (the semantic
//! component). Everything trains end-to-end on a hand-built reverse-mode
//! autodiff engine; no GPU or external ML framework is involved.
//!
//! Module map:
//! - [`tensor`]: tape-based autodiff, Adam, gradient checking, seeded RNG
//! - [`text`]: wordpiece vocabulary, tokenizer, slot-label projection
//! - [`corpus`]: grammar-driven corpus generation, splits, entropy, file formats
//! - [`nn`]: parameter store and transformer building blocks
//! - [`acoustic`]: conv time-reducing embedder + encoder-decoder transcriber
//! - [`embedder`]: the TopK / MatMul / Gumbel posterior embedders
//! - [`semantic`]: intent and slot decoding over embedded wordpieces
//! - [`harness`]: training loops, metrics, checkpoints, benchmarking, reports
//!
//! The `slukit` binary exposes the whole pipeline as subcommands; see the
//! guide under `book/` for a narrative walkthrough.

pub mod error;
pub mod tensor;
pub mod corpus;
pub mod text;

pub use error::{Error, Result};
