//! Read-Attend-Code (RAC) medical code prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape, deterministic RNG and
//!   the checkpoint container format.
//! - [`corpus`]: tokenization, vocabularies, code-title tables, encoding,
//!   dataset files and the synthetic generator.
//! - [`embeddings`]: skip-gram pretraining of the token embedding table.
//! - [`model`]: the reader (convolved embedding + self-attention stack) and
//!   the coder (code-title embedding + code-guided attention + sigmoid).
//! - [`training`]: loss, sentence-permutation augmentation, Adam, weight
//!   averaging and the epoch loop with early stopping.
//! - [`metrics`]: AUC, F1, precision@n and set agreement.
//! - [`annotation`]: human-coder sessions, the append-only record store and
//!   agreement reports.
//! - [`pipeline`]: file-level glue shared by the CLI and the Python bindings.

pub mod annotation;
pub mod corpus;
pub mod embeddings;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
