//! Multi-stage dialogue prompting engine.
//!
//! A knowledge-grounded reply is produced in two prompting passes against the
//! same language model: the first pass generates a knowledge sentence from
//! exemplars chosen for the current context, the second pass generates the
//! reply conditioned on the dialogue and that knowledge. The crate also ships
//! the automatic metrics used to score both passes.

pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod limit;
pub mod lm;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod retry;
pub mod selection;
pub mod synthetic;

pub use corpus::{Corpus, CorpusFormat, DialogueSample, QueryContext};
pub use embedding::{EmbeddingProvider, EmbeddingVector, HashEmbedder, SampleIndex};
pub use error::{Error, Result};
pub use lm::{CompletionRequest, CompletionResult, FinishReason, LmError, LmProvider, ScriptedLm};
pub use metrics::{MetricReport, TokenSeq};
pub use pipeline::{Mode, Pipeline, PipelineConfig, TurnTrace};
pub use prompt::{PromptFormat, PromptTemplateConfig, RenderedPrompt};
pub use selection::{SelectionConfig, Strategy};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes.as_ref()))
}
