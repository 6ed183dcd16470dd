//! Document embeddings built from sentence-cluster tokens.
//!
//! Sentences are embedded, quantized against a k-means codebook, and the
//! resulting cluster-id sequence is encoded by a small transformer trained to
//! reconstruct it. The pooled encoder states concatenated with the mean
//! sentence vector give the document embedding used for cosine retrieval.
//! [`evaluate`] scores rankers by genre-relevance precision@k.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below name the usual instantiations.

pub mod codebook;
pub mod corpus;
pub mod docvec;
pub mod embedstore;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod retrieval;
pub mod scalar;
pub mod sequencer;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Codebook32 = codebook::Codebook<f32>;
pub type Codebook64 = codebook::Codebook<f64>;
pub type EncoderModel32 = encoder::EncoderModel<f32>;
pub type EncoderModel64 = encoder::EncoderModel<f64>;
pub type SentenceEmbeddings32 = embedstore::SentenceEmbeddingSet<f32>;
pub type SentenceEmbeddings64 = embedstore::SentenceEmbeddingSet<f64>;
pub type DocumentEmbedding32 = docvec::DocumentEmbedding<f32>;
pub type EmbeddingIndex32 = retrieval::EmbeddingIndex<f32>;
pub type EmbeddingIndex64 = retrieval::EmbeddingIndex<f64>;
