//! Multi-granularity contrastive alignment pre-training toolkit.
//!
//! A desk-scale pipeline for cross-lingual encoder pre-training over mixed
//! monolingual/bilingual corpora. Masked language modeling runs on monolingual
//! batches; bilingual batches combine translation language modeling with two
//! contrastive alignment objectives: an in-batch sequence-to-sequence InfoNCE
//! loss over pooled sentence representations, and a token-to-token InfoNCE loss
//! over dictionary-mined synonym pairs inside each concatenated instance.
//!
//! Everything runs on a small self-contained f64 tensor engine with
//! tape-based reverse-mode differentiation, so every gradient is checkable
//! against finite differences.

pub mod cipher;
pub mod dictionary;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod sampler;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use tensor::{Tape, Tensor, TensorError, TensorId};
