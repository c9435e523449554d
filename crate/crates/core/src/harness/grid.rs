//! Factor grids over a base configuration.
//!
//! Vectors and retrievals are cached per retrieval-relevant setting (vector
//! source, embedded text mode, tag inclusion) and retrieved once at the
//! largest K of the grid; smaller K take prefixes.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{EmbeddingSource, ExperimentConfig, GridAxes};
use super::run::{load_inputs, retrieve_all, run_prepared, sample_vectors, Retrievals, RunOptions, RunReport};
use super::HarnessError;
use crate::embedder::EmbedTextMode;
use crate::eval::{write_rows_csv, Metrics, MetricsRow};

pub const GRID_CSV: &str = "grid.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<MetricsRow>,
    pub reports: Vec<RunReport>,
    pub csv_path: PathBuf,
}

impl GridReport {
    pub fn complete(&self) -> bool {
        self.rows.iter().all(|r| r.status == "ok")
    }
}

fn or<T: Clone>(axis: &Option<Vec<T>>, value: T) -> Vec<T> {
    axis.clone().unwrap_or_else(|| vec![value])
}

/// One config per grid point, store axis outermost and decoding innermost.
pub fn expand_grid(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let axes = &base.grid;
    let stores: Vec<Option<PathBuf>> = match &axes.embedding_store {
        Some(stores) => stores.iter().cloned().map(Some).collect(),
        None => vec![None],
    };
    let mut out = Vec::new();
    for store in &stores {
        for mode in or(&axes.embed_text_mode, base.prompt.embed_text_mode) {
            for k in or(&axes.k, base.prompt.max_demos) {
                for history in or(&axes.history_mode, base.prompt.history_mode) {
                    for tags in or(&axes.speaker_tags, base.prompt.speaker_tags) {
                        for strategy in or(&axes.decoding_strategy, base.prompt.decoding_strategy) {
                            let mut c = base.clone();
                            if let Some(store) = store {
                                c.embedding.source = EmbeddingSource::Precomputed { store: store.clone() };
                            }
                            c.prompt.embed_text_mode = mode;
                            c.prompt.max_demos = k;
                            c.prompt.history_mode = history;
                            c.prompt.speaker_tags = tags;
                            c.prompt.decoding_strategy = strategy;
                            // keep the store tag in ids of store grids
                            c.grid = GridAxes {
                                embedding_store: axes.embedding_store.as_ref().map(|_| Vec::new()),
                                ..GridAxes::default()
                            };
                            out.push(c);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Key of the retrieval cache.
fn retrieval_key(config: &ExperimentConfig) -> (String, EmbedTextMode, bool) {
    let source = serde_json::to_string(&config.embedding.source).expect("sources serialize");
    (source, config.prompt.embed_text_mode, config.embedding.speaker_tags)
}

fn failed_row(config: &ExperimentConfig, message: &str) -> MetricsRow {
    let m = Metrics::default();
    MetricsRow {
        config_id: config.config_id(),
        status: format!("failed: {message}"),
        precision: m.precision,
        recall: m.recall,
        relevance_micro: None,
        coverage_micro: None,
        relevance_macro: None,
        coverage_macro: None,
        samples: 0,
        succeeded: 0,
        failed: 0,
        unfittable: 0,
        correct: 0,
        predicted_total: 0,
        gold_total: 0,
    }
}

/// Runs every grid point; a failing point gets a failed row and the grid
/// continues. Writes `<output_dir>/grid.csv`.
pub fn run_grid(base: &ExperimentConfig, options: RunOptions) -> Result<GridReport, HarnessError> {
    base.validate()?;
    let inputs = load_inputs(base)?;
    let configs = expand_grid(base);
    let max_k = configs.iter().map(|c| c.prompt.max_demos).max().unwrap_or(0);

    let mut cache: HashMap<(String, EmbedTextMode, bool), Result<Retrievals, String>> = HashMap::new();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for config in &configs {
        let key = retrieval_key(config);
        let retrievals = cache.entry(key).or_insert_with(|| {
            log::info!("retrieving for {}", config.config_id());
            sample_vectors(config, &inputs)
                .and_then(|store| retrieve_all(&store, &inputs, max_k, config.parallelism))
                .map_err(|e| e.to_string())
        });
        let outcome = match retrievals {
            Ok(retrievals) => run_prepared(config, &inputs, retrievals, options).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        match outcome {
            Ok(report) => {
                rows.push(report.row());
                reports.push(report);
            }
            Err(message) => {
                log::error!("{}: {message}", config.config_id());
                rows.push(failed_row(config, &message));
            }
        }
    }

    std::fs::create_dir_all(&base.output_dir).map_err(HarnessError::io(&base.output_dir))?;
    let csv_path = base.output_dir.join(GRID_CSV);
    let file = std::fs::File::create(&csv_path).map_err(HarnessError::io(&csv_path))?;
    write_rows_csv(file, &rows).map_err(|e| HarnessError::Config(format!("{}: {e}", csv_path.display())))?;
    Ok(GridReport { rows, reports, csv_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::DecodingStrategy;

    #[test]
    fn expansion_order_and_size() {
        let mut base = ExperimentConfig::new("a", "b", "out");
        base.grid.k = Some(vec![1, 3, 10]);
        base.grid.decoding_strategy =
            Some(vec![DecodingStrategy::SlotValueGivenKey, DecodingStrategy::KeyValueGeneration]);
        let configs = expand_grid(&base);
        assert_eq!(configs.len(), base.grid.size());
        let ids: Vec<String> = configs.iter().map(|c| c.config_id()).collect();
        assert_eq!(ids[0], "run_emb-ua_hist-ua_tags-on_k1_slot");
        assert_eq!(ids[1], "run_emb-ua_hist-ua_tags-on_k1_kv");
        assert_eq!(ids[5], "run_emb-ua_hist-ua_tags-on_k10_kv");
        let unique: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
    }

    #[test]
    fn single_point() {
        let base = ExperimentConfig::new("a", "b", "out");
        let configs = expand_grid(&base);
        assert_eq!(configs.len(), 1);
        assert_eq!(configs[0].config_id(), base.config_id());
    }

    #[test]
    fn store_axis_tags_ids() {
        let mut base = ExperimentConfig::new("a", "b", "out");
        base.grid.embedding_store = Some(vec!["labse.jsonl".into(), "d2f.jsonl".into()]);
        let ids: Vec<String> = expand_grid(&base).iter().map(|c| c.config_id()).collect();
        assert!(ids[0].ends_with("_store-labse"), "{}", ids[0]);
        assert!(ids[1].ends_with("_store-d2f"));
    }
}
