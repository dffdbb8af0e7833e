//! Generative recommendation with explicit reflect-and-correct decoding.
//!
//! Items are tokenized into short discrete semantic IDs by residual k-means
//! quantization, and a small encoder-decoder model learns to generate the
//! next item's token sequence from a user's interaction history. On top of
//! that one-pass backbone, this crate implements the full
//! generate-reflect-correct training and inference stack:
//!
//! * a three-segment decoding template (draft, structured reflection,
//!   correction) with a custom self-attention mask that predicts all
//!   reflection slots in parallel,
//! * supervised fine-tuning on beam-search drafts annotated with
//!   first-divergence and attribute-consistency labels,
//! * GRPO reinforcement learning over whole draft/reflect/correct episodes
//!   with a decomposed reward (token hits, localization, semantic matching,
//!   strict improvement),
//! * entropy-guided reflection scheduling inside beam search: beams are
//!   re-ranked by base log-probability plus a reflection-entropy bonus, and
//!   beams whose reflection declares the draft correct skip the correction
//!   pass entirely,
//! * leave-one-out retrieval evaluation (Recall@K, NDCG@K) plus
//!   reflection-quality metrics.
//!
//! Everything runs on a self-contained f64 reverse-mode autodiff engine
//! ([`tensor`]) sized for CPU-scale experiments. The `examples/` directory
//! has one runnable walkthrough per capability; the `grc` binary chains the
//! stages into reproducible experiment runs.

pub mod data;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rl;
pub mod rng;
pub mod sft;
pub mod tensor;
pub mod tokenizer;

pub use error::GrcError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, GrcError>;
