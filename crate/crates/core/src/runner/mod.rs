//! Dataset ingestion, experiment configuration, and the evaluation protocol.

mod artifacts;
mod config;
mod dataset;
mod experiment;

use thiserror::Error;

pub use artifacts::{
    load_report_entry, render_report, render_report_csv, Manifest, ScoreRow, SeedManifest, Summary,
    MANIFEST_FILE, REPORT_CSV_FILE, REPORT_MD_FILE, RUNS_FILE, SCORES_FILE,
};
pub use config::{BackendSpec, CriterionChoice, ExperimentConfig, Setting};
pub use dataset::{estimate_prior, load_dataset, parse_dataset, Dataset};
pub use experiment::{
    build_backend, rank_orderings, run_experiment, run_experiment_with_backend, select_examples,
    ExperimentOutcome, Prepared, RankedSeed, RunOptions, SeedDraw,
};

use crate::backend::BackendError;
use crate::eval::EvalError;
use crate::label_dist::DistError;
use crate::optimizer::OptimizerError;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("line {line}: label {label:?} is not in the label space")]
    UnknownLabel { line: usize, label: String },
    #[error("example {0} has no label")]
    Unlabeled(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("interrupted after {completed_cells} evaluation cells; partial results were flushed")]
    Interrupted { completed_cells: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dist(#[from] DistError),
}
