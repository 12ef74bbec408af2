//! JSONL datasets and empirical label priors.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::RunnerError;
use crate::backend::Example;
use crate::label_dist::{normalize, LabelDist, LabelSpace};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Count per label, aligned with the label space.
    pub histogram: Vec<usize>,
    pub unlabeled: usize,
}

#[derive(Deserialize)]
struct Record {
    text: Option<String>,
    #[serde(default)]
    label: Option<String>,
}

/// Loads `{"text": ..., "label": ...}` records, one per line, in file order.
///
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn load_dataset(path: impl AsRef<Path>, space: &LabelSpace) -> Result<Dataset, RunnerError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RunnerError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_dataset(BufReader::new(file), space, &path.display().to_string())
}

pub fn parse_dataset(
    reader: impl BufRead,
    space: &LabelSpace,
    source: &str,
) -> Result<Dataset, RunnerError> {
    let parse_error = |line: usize, message: String| RunnerError::Parse {
        source_name: source.to_string(),
        line,
        message,
    };
    let mut examples = Vec::new();
    let mut histogram = vec![0; space.len()];
    let mut unlabeled = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| parse_error(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_error(line_no, e.to_string()))?;
        let text = record
            .text
            .ok_or_else(|| parse_error(line_no, "missing \"text\"".into()))?;
        if text.trim().is_empty() {
            return Err(parse_error(line_no, "\"text\" is empty".into()));
        }
        match &record.label {
            Some(label) => {
                let y = space.index_of(label).ok_or_else(|| RunnerError::UnknownLabel {
                    line: line_no,
                    label: label.clone(),
                })?;
                histogram[y] += 1;
            }
            None => unlabeled += 1,
        }
        examples.push(Example {
            text,
            label: record.label,
        });
    }
    Ok(Dataset {
        examples,
        histogram,
        unlabeled,
    })
}

/// Empirical label frequencies, without smoothing.
pub fn estimate_prior(examples: &[Example], space: &LabelSpace) -> Result<LabelDist, RunnerError> {
    if examples.is_empty() {
        return Err(RunnerError::Config("cannot estimate a prior from no examples".into()));
    }
    let mut counts = vec![0.0; space.len()];
    for (i, ex) in examples.iter().enumerate() {
        let label = ex.label.as_deref().ok_or(RunnerError::Unlabeled(i))?;
        let y = space.index_of(label).ok_or_else(|| RunnerError::UnknownLabel {
            line: i + 1,
            label: label.to_string(),
        })?;
        counts[y] += 1.0;
    }
    Ok(normalize(space.id(), &counts)?)
}
