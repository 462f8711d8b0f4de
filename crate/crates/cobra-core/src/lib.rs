//! A desk-scale, CPU-only vision-language model built on a selective
//! state-space backbone, written to be verified rather than to be fast.
//!
//! The crate provides:
//! - the structured/selective SSM core with three provably-equivalent
//!   execution modes and constant-size streaming state ([`ssm`]),
//! - a dual toy vision encoder, an external-feature ingestion path, and two
//!   projector variants ([`vision`]),
//! - a recurrent language backbone with multi-modal fusion, full-sequence
//!   logits and constant-memory autoregressive generation ([`lm`]),
//! - byte-exact prompt templates, OCR-token ordering and a byte-level
//!   tokenizer ([`prompt`]),
//! - a toy supervised fine-tuning loop with the cosine/warm-up schedule and
//!   ablation variants ([`train`]),
//! - a throughput harness with a causal-attention reference for the
//!   linear-vs-quadratic decode comparison ([`bench`]),
//! - runnable invariant suites shared by tests and the CLI ([`verify`]).

pub mod bench;
pub mod container;
pub mod error;
pub mod linalg;
pub mod lm;
pub mod pipeline;
pub mod prompt;
pub mod ssm;
pub mod train;
pub mod verify;
pub mod vision;

pub use error::{BenchError, FormatError, ModelError, TrainError};
