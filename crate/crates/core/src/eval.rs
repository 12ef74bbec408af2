//! Accuracy, Expected Calibration Error, and run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Ordering;
use crate::optimizer::CriterionKind;
use crate::scoring::{Prediction, ScoringMethod};

/// Default number of ECE bins.
pub const DEFAULT_ECE_BINS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("run has no predictions")]
    EmptyRun,
    #[error("no runs to aggregate")]
    EmptyInput,
    #[error("confidence {0} is outside [0, 1]")]
    BadConfidence(f64),
    #[error("number of bins must be >= 1")]
    ZeroBins,
    #[error("confidence and correctness lists differ in length")]
    LengthMismatch,
}

/// A prediction paired with the gold label index.
#[derive(Debug, Clone, PartialEq)]
pub struct Judged {
    pub prediction: Prediction,
    pub gold: usize,
}

impl Judged {
    pub fn correct(&self) -> bool {
        self.prediction.label == self.gold
    }
}

/// Predictions of one ordering on the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub predictions: Vec<Judged>,
    pub ordering: Ordering,
    pub seed: u64,
    pub criterion: CriterionKind,
    pub scoring: ScoringMethod,
}

impl RunResult {
    fn confidences(&self) -> Vec<f64> {
        self.predictions
            .iter()
            .map(|j| j.prediction.confidence)
            .collect()
    }

    fn correctness(&self) -> Vec<bool> {
        self.predictions.iter().map(Judged::correct).collect()
    }
}

pub fn accuracy(run: &RunResult) -> Result<f64, EvalError> {
    if run.predictions.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let correct = run.predictions.iter().filter(|j| j.correct()).count();
    Ok(correct as f64 / run.predictions.len() as f64)
}

pub fn ece(run: &RunResult, n_bins: usize) -> Result<f64, EvalError> {
    if run.predictions.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    expected_calibration_error(&run.confidences(), &run.correctness(), n_bins)
}

/// Bin of a confidence under right-closed equal-width bins, with 0 in bin 0.
///
/// Products that land within 1e-9 of a bin edge are snapped to it, so that
/// e.g. 0.65 with 100 bins falls in (0.64, 0.65] despite 0.65 * 100 rounding
/// slightly above 65.
fn bin_index(confidence: f64, n_bins: usize) -> usize {
    let scaled = confidence * n_bins as f64;
    let nearest = scaled.round();
    let upper = if (scaled - nearest).abs() < 1e-9 {
        nearest
    } else {
        scaled.ceil()
    };
    (upper as usize).saturating_sub(1).min(n_bins - 1)
}

/// ECE over `n_bins` equal-width bins; empty bins contribute nothing.
pub fn expected_calibration_error(
    confidences: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> Result<f64, EvalError> {
    if n_bins == 0 {
        return Err(EvalError::ZeroBins);
    }
    if confidences.len() != correct.len() {
        return Err(EvalError::LengthMismatch);
    }
    if confidences.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    if let Some(&c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(EvalError::BadConfidence(c));
    }

    // (count, sum of confidences, number correct)
    let mut bins = vec![(0usize, 0.0f64, 0usize); n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = &mut bins[bin_index(c, n_bins)];
        b.0 += 1;
        b.1 += c;
        b.2 += usize::from(ok);
    }
    let n = confidences.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.0 > 0)
        .map(|&(count, conf_sum, hits)| {
            let m = count as f64;
            (m / n) * (hits as f64 / m - conf_sum / m).abs()
        })
        .sum())
}

/// One persisted run: an ordering evaluated on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub ordering: Ordering,
    pub criterion: CriterionKind,
    pub scoring: ScoringMethod,
    /// Criterion score of the ordering (0 for the random baseline).
    pub score: f64,
    /// Whether the ordering was selected (always true for the random baseline).
    pub selected: bool,
    /// Fraction in [0, 1].
    pub accuracy: f64,
    /// Fraction in [0, 1].
    pub ece: f64,
    pub n: usize,
}

impl RunRow {
    pub fn from_run(run: &RunResult, score: f64, selected: bool, n_bins: usize) -> Result<Self, EvalError> {
        Ok(Self {
            seed: run.seed,
            ordering: run.ordering.clone(),
            criterion: run.criterion,
            scoring: run.scoring,
            score,
            selected,
            accuracy: accuracy(run)?,
            ece: ece(run, n_bins)?,
            n: run.predictions.len(),
        })
    }
}

/// Mean/std over runs, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_mean: f64,
    /// Population standard deviation across runs.
    pub accuracy_std: f64,
    pub ece_mean: f64,
    pub n_runs: usize,
    pub rows: Vec<RunRow>,
}

impl EvalReport {
    /// `65.8_{7.2}`: mean accuracy with its std as a subscript.
    pub fn accuracy_cell(&self) -> String {
        table_cell(self.accuracy_mean, self.accuracy_std)
    }
}

pub fn table_cell(mean: f64, std: f64) -> String {
    format!("{mean:.1}_{{{std:.1}}}")
}

/// Single-pass (Welford) mean and population std.
fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for x in values {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    (mean, (m2 / n as f64).max(0.0).sqrt(), n)
}

pub fn aggregate(runs: &[RunResult]) -> Result<EvalReport, EvalError> {
    let rows = runs
        .iter()
        .map(|r| RunRow::from_run(r, 0.0, true, DEFAULT_ECE_BINS))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate_rows(rows)
}

/// Aggregates persisted rows; all rows count as runs.
pub fn aggregate_rows(rows: Vec<RunRow>) -> Result<EvalReport, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (accuracy_mean, accuracy_std, n_runs) = mean_std(rows.iter().map(|r| 100.0 * r.accuracy));
    let (ece_mean, _, _) = mean_std(rows.iter().map(|r| 100.0 * r.ece));
    Ok(EvalReport {
        accuracy_mean,
        accuracy_std,
        ece_mean,
        n_runs,
        rows,
    })
}

/// One table cell source: a method evaluated on a dataset.
#[derive(Debug, Clone)]
pub struct ReportEntry {
    pub dataset: String,
    pub method: String,
    pub report: EvalReport,
}

/// CSV with one row per dataset x method.
pub fn render_csv(entries: &[ReportEntry]) -> String {
    let mut out = String::from("dataset,method,n_runs,accuracy_mean,accuracy_std,ece_mean\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{:.1},{:.1},{:.1}",
            csv_field(&e.dataset),
            csv_field(&e.method),
            e.report.n_runs,
            e.report.accuracy_mean,
            e.report.accuracy_std,
            e.report.ece_mean
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMetric {
    /// `mean_{std}` accuracy cells.
    Accuracy,
    /// Mean ECE cells.
    Ece,
}

/// Markdown table: methods as rows, datasets as columns, plus a
/// macro-averaged `Avg.` column (each dataset weighted equally).
pub fn render_markdown(entries: &[ReportEntry], metric: TableMetric) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), &EvalReport> = BTreeMap::new();
    for e in entries {
        if !datasets.contains(&e.dataset.as_str()) {
            datasets.push(&e.dataset);
        }
        if !methods.contains(&e.method.as_str()) {
            methods.push(&e.method);
        }
        cells.insert((e.method.as_str(), e.dataset.as_str()), &e.report);
    }

    let mut out = String::from("| Method |");
    for d in &datasets {
        let _ = write!(out, " {d} |");
    }
    out.push_str(" Avg. |\n|---|");
    for _ in 0..=datasets.len() {
        out.push_str("---|");
    }
    out.push('\n');

    for m in &methods {
        let _ = write!(out, "| {m} |");
        let mut present = Vec::new();
        for d in &datasets {
            match cells.get(&(*m, *d)) {
                Some(r) => {
                    present.push(*r);
                    let _ = write!(out, " {} |", metric_cell(metric, r.accuracy_mean, r.accuracy_std, r.ece_mean));
                }
                None => out.push_str(" - |"),
            }
        }
        if present.len() == datasets.len() && !present.is_empty() {
            let n = present.len() as f64;
            let acc = present.iter().map(|r| r.accuracy_mean).sum::<f64>() / n;
            let std = present.iter().map(|r| r.accuracy_std).sum::<f64>() / n;
            let ece = present.iter().map(|r| r.ece_mean).sum::<f64>() / n;
            let _ = writeln!(out, " {} |", metric_cell(metric, acc, std, ece));
        } else {
            out.push_str(" - |\n");
        }
    }
    out
}

fn metric_cell(metric: TableMetric, acc: f64, std: f64, ece: f64) -> String {
    match metric {
        TableMetric::Accuracy => table_cell(acc, std),
        TableMetric::Ece => format!("{ece:.1}"),
    }
}
