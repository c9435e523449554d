//! Tables and CSVs from finished run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::records::read_records;
use super::run::RunReport;
use super::HarnessError;
use crate::eval::{write_rows_csv, MetricsRow};

pub const RESULTS_CSV: &str = "results.csv";
pub const RELEVANCE_CSV: &str = "relevance_coverage.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub rows: Vec<MetricsRow>,
    pub text: String,
    pub results_csv: PathBuf,
    pub relevance_csv: PathBuf,
}

#[derive(Debug, Serialize)]
struct RelevanceRow<'a> {
    config_id: &'a str,
    sample_id: &'a str,
    relevance: f64,
    coverage: f64,
    intersection: usize,
    demo_keys: usize,
    gold_keys: usize,
}

/// Run directories under `path`: the path itself if it holds a metrics
/// file, otherwise its immediate subdirectories that do.
fn run_dirs(path: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if path.join("metrics.json").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(HarnessError::io(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Summarizes completed runs found under `inputs` into `out_dir`.
pub fn report(inputs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary, HarnessError> {
    let mut dirs = Vec::new();
    for input in inputs {
        dirs.extend(run_dirs(input)?);
    }
    if dirs.is_empty() {
        return Err(HarnessError::Config("no completed runs (metrics.json) found".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;

    let relevance_csv = out_dir.join(RELEVANCE_CSV);
    let mut rel = csv::Writer::from_path(&relevance_csv)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", relevance_csv.display())))?;
    let mut rows = Vec::new();
    let mut fixes: BTreeMap<String, usize> = BTreeMap::new();
    let mut statuses: BTreeMap<String, usize> = BTreeMap::new();
    for dir in &dirs {
        let metrics_path = dir.join("metrics.json");
        let text = std::fs::read_to_string(&metrics_path).map_err(HarnessError::io(&metrics_path))?;
        let run: RunReport = serde_json::from_str(&text).map_err(|e| HarnessError::Records {
            path: metrics_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        for (fix, n) in &run.repair_fixes {
            *fixes.entry(fix.clone()).or_default() += n;
        }
        for (status, n) in &run.repair_status {
            *statuses.entry(status.clone()).or_default() += n;
        }
        let (records, _) = read_records(&dir.join("records.jsonl"))?;
        for record in &records {
            let ratios = record.key_overlap.ratios();
            rel.serialize(RelevanceRow {
                config_id: &run.config_id,
                sample_id: &record.sample_id,
                relevance: ratios.relevance,
                coverage: ratios.coverage,
                intersection: record.key_overlap.intersection,
                demo_keys: record.key_overlap.demo_keys,
                gold_keys: record.key_overlap.gold_keys,
            })
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        rows.push(run.row());
    }
    rel.flush().map_err(HarnessError::io(&relevance_csv))?;

    let results_csv = out_dir.join(RESULTS_CSV);
    let file = std::fs::File::create(&results_csv).map_err(HarnessError::io(&results_csv))?;
    write_rows_csv(file, &rows).map_err(|e| HarnessError::Config(e.to_string()))?;

    let text = render_summary(&rows, &statuses, &fixes);
    let summary_path = out_dir.join(SUMMARY_TXT);
    std::fs::write(&summary_path, &text).map_err(HarnessError::io(&summary_path))?;
    Ok(ReportSummary { rows, text, results_csv, relevance_csv })
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{:.1}", v * 100.0))
}

fn render_summary(rows: &[MetricsRow], statuses: &BTreeMap<String, usize>, fixes: &BTreeMap<String, usize>) -> String {
    let width = rows.iter().map(|r| r.config_id.len()).max().unwrap_or(0).max(13);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6} {:>6}  {:>6} {:>6}  {:>7} {:>6} {:>6} {:>6}",
        "configuration", "prec", "rec", "rel", "cov", "samples", "ok", "failed", "unfit"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6} {:>6}  {:>6} {:>6}  {:>7} {:>6} {:>6} {:>6}",
            r.config_id,
            pct(Some(r.precision)),
            pct(Some(r.recall)),
            pct(r.relevance_micro),
            pct(r.coverage_micro),
            r.samples,
            r.succeeded,
            r.failed,
            r.unfittable
        );
    }
    let failures: usize = rows.iter().map(|r| r.failed).sum();
    let unfittable: usize = rows.iter().map(|r| r.unfittable).sum();
    let _ = writeln!(out, "\nfailed samples: {failures}, unfittable samples: {unfittable}");
    if !statuses.is_empty() {
        let _ = writeln!(out, "\nrepair outcomes:");
        for (status, n) in statuses {
            let _ = writeln!(out, "  {status:<20} {n}");
        }
        let _ = writeln!(out, "repair fixes:");
        for (fix, n) in fixes {
            let _ = writeln!(out, "  {fix:<20} {n}");
        }
    }
    out
}
