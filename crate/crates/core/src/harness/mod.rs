//! Experiment orchestration: configuration, embedding precomputation,
//! per-sample pipeline runs with resumable records, factor grids and reports.

mod config;
mod embed;
mod grid;
mod records;
mod report;
mod run;

use std::path::PathBuf;

pub use config::{interpolate_env, CorpusPaths, EmbeddingConfig, EmbeddingSource, ExperimentConfig, GridAxes};
pub use embed::{precompute_embeddings, PrecomputeSummary};
pub use grid::{expand_grid, run_grid, GridReport};
pub use records::{read_records, RecordWriter, RepairSummary, SampleRecord, SampleStatus, SlotOutput};
pub use report::{report, ReportSummary};
pub use run::{
    dry_run, load_inputs, retrieve_all, run_experiment, run_prepared, sample_vectors, DryRunReport, Inputs,
    Retrievals, RunOptions, RunReport,
};

use crate::corpus::CorpusError;
use crate::embedder::EmbedError;
use crate::eval::EvalError;
use crate::retriever::RetrievalError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Records { path: PathBuf, line: usize, message: String },
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
