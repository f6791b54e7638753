//! Soft-prompt guided joint learning for cross-domain aspect term
//! extraction.
//!
//! The pipeline: load or synthesize BIO-tagged domain corpora, pick
//! transferable prompt tokens by mutual information and embedding
//! distance, encode word / masked-POS / prompt streams through a shared
//! encoder, train an aspect head and a masked-POS recovery head under a
//! weighted joint loss, and score span-level F1 across domain transfers.
//!
//! Modules follow the pipeline stages:
//!
//! - [`corpus`]: the BIO data model, TSV loading, synthetic corpora
//! - [`syntax`]: POS vocabulary, pluggable taggers, the masking procedure
//! - [`prompts`]: pivot extraction, MI scoring, the learnable prompt bank
//! - [`model`]: the encoder, stream fusion, aspect/syntax heads, checkpoints
//! - [`training`]: losses, Adam, the joint training loop
//! - [`evaluation`]: span F1, transfer experiments, ablations, sweeps
//! - [`cli`]: the `xprompt` command-line entry point

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod prompts;
pub mod rng;
pub mod syntax;
pub mod training;

pub use error::{Error, Result};
