//! Sequential multimodal music recommendation.
//!
//! The pipeline turns timestamped listening logs into sessions, pretrains
//! per-track embeddings (CBOW or LSA over sessions, a VAE over acoustic
//! features, PCA-reduced lyric vectors, projected tag vectors), trains a
//! BiGRU encoder with a single additive attention pass shared across every
//! modality, and scores next-track prediction with HitRatio@k.

pub mod error;
pub mod exec;
pub mod numerics;

pub use error::{Error, Result};
pub mod embedding;
pub mod pretrain;
pub mod sessions;
pub mod acoustic;
pub mod fusion;
pub mod eval;
pub mod ingest;
pub mod cli;
