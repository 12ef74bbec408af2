//! Files written to an experiment's output directory.
//!
//! Nothing here carries timestamps or host details, so two runs of the same
//! config produce identical bytes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, RunnerError};
use crate::backend::Ordering;
use crate::eval::{aggregate_rows, render_csv, render_markdown, EvalReport, ReportEntry, RunRow, TableMetric};
use crate::optimizer::CriterionKind;
use crate::scoring::ScoringMethod;

pub const RUNS_FILE: &str = "runs.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_MD_FILE: &str = "report.md";
pub const REPORT_CSV_FILE: &str = "report.csv";

/// Criterion score of one sampled ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub seed: u64,
    pub sample_index: usize,
    pub ordering: Ordering,
    pub criterion: CriterionKind,
    pub score: f64,
    /// Position among the selected orderings, if selected.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub seed: u64,
    /// Train-file positions of the demos.
    pub demo_indices: Vec<usize>,
    /// Train-file positions of the dev sample (empty when no dev set is used).
    pub dev_indices: Vec<usize>,
    pub ordering_seed: u64,
    /// Reference distribution for PDO with a dev set.
    pub prior: Option<Vec<f64>>,
    /// Queries issued while ranking, cache hits included.
    pub ranking_queries: u64,
    /// Queries issued while evaluating on the test split, cache hits included.
    pub evaluation_queries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ece_mean: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub method: String,
    pub scoring: ScoringMethod,
    pub config_hash: String,
    pub backend: String,
    pub complete: bool,
    pub completed_cells: usize,
    pub total_cells: usize,
    /// Queries that reached the backend (cache misses) during this invocation.
    pub backend_calls: u64,
    pub test_indices: Vec<usize>,
    pub seeds: Vec<SeedManifest>,
    pub summary: Option<Summary>,
    pub config: ExperimentConfig,
}

fn io_error(path: &Path, source: std::io::Error) -> RunnerError {
    RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Append-only JSON-lines file, flushed after every record.
pub(crate) struct JsonlWriter {
    path: PathBuf,
    file: File,
}

impl JsonlWriter {
    /// Truncates any previous file at `path`.
    pub(crate) fn create(path: PathBuf) -> Result<Self, RunnerError> {
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        Ok(Self { path, file })
    }

    pub(crate) fn append<T: Serialize>(&mut self, record: &T) -> Result<(), RunnerError> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|e| io_error(&self.path, e))
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), RunnerError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub(crate) fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), RunnerError> {
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&dir.join(MANIFEST_FILE), &json)
}

pub(crate) fn summary_of(report: &EvalReport) -> Summary {
    Summary {
        accuracy_mean: report.accuracy_mean,
        accuracy_std: report.accuracy_std,
        ece_mean: report.ece_mean,
        n_runs: report.n_runs,
    }
}

/// Markdown accuracy and ECE tables, grouped by scoring method.
pub fn render_report(entries: &[(ScoringMethod, ReportEntry)]) -> String {
    let mut out = String::new();
    for scoring in [ScoringMethod::Direct, ScoringMethod::Pmi] {
        let group: Vec<ReportEntry> = entries
            .iter()
            .filter(|(s, _)| *s == scoring)
            .map(|(_, e)| e.clone())
            .collect();
        if group.is_empty() {
            continue;
        }
        let name = match scoring {
            ScoringMethod::Direct => "Direct",
            ScoringMethod::Pmi => "PMI",
        };
        out.push_str(&format!("## {name}: accuracy\n\n"));
        out.push_str(&render_markdown(&group, TableMetric::Accuracy));
        out.push_str(&format!("\n## {name}: ECE\n\n"));
        out.push_str(&render_markdown(&group, TableMetric::Ece));
        out.push('\n');
    }
    out
}

pub fn render_report_csv(entries: &[(ScoringMethod, ReportEntry)]) -> String {
    let group: Vec<ReportEntry> = entries.iter().map(|(_, e)| e.clone()).collect();
    render_csv(&group)
}

pub(crate) fn write_reports(
    dir: &Path,
    entries: &[(ScoringMethod, ReportEntry)],
) -> Result<(), RunnerError> {
    write_file(&dir.join(REPORT_MD_FILE), &render_report(entries))?;
    write_file(&dir.join(REPORT_CSV_FILE), &render_report_csv(entries))
}

/// Reads a finished run directory back into a report entry (selected rows only).
pub fn load_report_entry(dir: impl AsRef<Path>) -> Result<(ScoringMethod, ReportEntry), RunnerError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_error(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RunnerError::Parse {
        source_name: manifest_path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if !manifest.complete {
        return Err(RunnerError::Config(format!(
            "{} is from an interrupted run; re-run evaluate to finish it",
            dir.display()
        )));
    }
    let runs_path = dir.join(RUNS_FILE);
    let file = File::open(&runs_path).map_err(|e| io_error(&runs_path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(&runs_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RunRow = serde_json::from_str(&line).map_err(|e| RunnerError::Parse {
            source_name: runs_path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if row.selected {
            rows.push(row);
        }
    }
    let report = aggregate_rows(rows)?;
    Ok((
        manifest.scoring,
        ReportEntry {
            dataset: manifest.dataset,
            method: manifest.method,
            report,
        },
    ))
}
