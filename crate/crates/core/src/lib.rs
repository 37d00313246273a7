//! Retrieval-augmented multi-hop question answering.
//!
//! A question is unrolled by an LLM into sub-questions and a triple chain
//! with uncertainty masks, the unrolled text retrieves candidates from a flat
//! cosine index, candidates are reranked by contrasting final-layer and
//! premature-layer token similarities, and the LLM completes the chain and
//! answers from the top documents.

pub mod config;
pub mod embedding;
pub mod eval;
pub mod exec;
pub mod grammar;
pub mod http;
pub mod index;
pub mod limit;
pub mod llm;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod prompt;
pub mod reasoning;
pub mod rerank;
pub mod unroll;

pub use config::PipelineConfig;
pub use embedding::{EmbeddingStore, EncoderProvider, LayeredEmbeddings};
pub use exec::ExecMode;
pub use index::FlatIndex;
pub use model::{CompletedChain, Document, EntitySlot, QaExample, ReasoningChain, Triple, UnrolledQuestion};
pub use pipeline::{Engine, PipelineError, Stage};
pub use rerank::{RerankConfig, Reranker, Strategy};
