//! Retrieval-augmented in-context learning for dialogue state tracking.
//!
//! Training turns are embedded and the nearest ones to each test turn become
//! demonstrations in a completion prompt. A language model then fills slot
//! values, its output is repaired and parsed, and predictions are scored
//! against gold states.
//!
//! Modules, in pipeline order: [`corpus`], [`embedder`], [`retriever`],
//! [`prompt`], [`llm`], [`repair`], [`eval`], [`harness`].

pub mod corpus;
pub mod embedder;
pub mod eval;
pub mod harness;
pub mod http;
pub mod llm;
pub mod prompt;
pub mod repair;
pub mod retriever;

pub use corpus::{
    accumulate_turns, load_corpus, render_history, save_corpus, Corpus, Dialogue, DialogueState, HistoryMode,
    Schema, Speaker, Split, TurnSample, Utterance, NOT_MENTIONED,
};
pub use embedder::{mock_embed, EmbedTextMode, Embedder, EmbeddingStore, EmbeddingVector, MockEmbedder};
pub use eval::{micro_metrics, relevance_coverage, Metrics, Prediction, RelevanceCoverage, SlotTriple};
pub use harness::{run_experiment, run_grid, ExperimentConfig, HarnessError, RunOptions, RunReport};
pub use llm::{CompletionBackend, LlmBackendDescriptor};
pub use prompt::{assemble_prompt, DecodingStrategy, PromptConfig, RenderedPrompt, TokenCounter};
pub use repair::{repair_and_parse, RepairOutcome, RepairStatus};
pub use retriever::{retrieve, Neighbor, RetrievalResult, Retriever};
