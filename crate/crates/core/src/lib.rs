//! Desk-scale multilingual sequence-to-sequence training framework.
//!
//! The crate trains transformer encoder-decoder models on synthetic
//! languages derived from a shared pivot, so that zero-shot cross-lingual
//! transfer is measurable in minutes on a CPU. It provides:
//!
//! - [`tensor`] / [`autograd`] / [`gradcheck`]: a small f64 tensor engine
//!   with reverse-mode differentiation and finite-difference verification;
//! - [`data`]: synthetic corpus generation and temperature-based
//!   multilingual sampling;
//! - [`model`]: the encoder-decoder with tied embeddings, per-stage
//!   parameter partitions and a positional-disentangled encoder layer;
//! - [`trainer`]: masked-LM pretraining, the two-stage freeze-scheduled
//!   fine-tune, Adam, checkpoints, and the one-round back-translation
//!   pipeline;
//! - [`decode`]: beam search;
//! - [`eval`]: corpus BLEU and a sentence-retrieval probe;
//! - [`experiments`]: the desk-scale ablation harness;
//! - [`config`]: the flat `key = value` run configuration.

pub mod autograd;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
