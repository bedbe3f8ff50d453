//! Bi-Tuning of a frozen causal language model for sequential recommendation,
//! with an MoE-based querying transformer (M-Former) that injects collaborative
//! information from a frozen ID-based encoder into trainable prefix tokens.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`corpus`]: interaction data ingestion, leave-one-out splitting, synthetic fixtures
//! - [`templater`]: prompt rendering and word-level tokenization
//! - [`id_encoder`]: frozen bidirectional ID-sequence encoder (cloze-pretrained)
//! - [`mformer`]: router + query experts + cross-attention blocks producing the prefix
//! - [`backbone`]: frozen decoder-only LM accepting injected prefix/suffix embeddings
//! - [`trainer`]: contrastive + load-balancing losses, two-stage training schedule
//! - [`evaluator`]: cosine ranking and Recall@N / NDCG@N / MRR
//!
//! All numeric work runs in `f64` on a reverse-mode tape ([`autodiff`]) so that
//! analytic gradients can be validated against central finite differences.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod id_encoder;
pub mod mformer;
pub mod nn;
pub mod pipeline;
pub mod templater;
pub mod trainer;

pub use error::{Error, Result};
