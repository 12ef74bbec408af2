//! Experiment configuration, read from TOML.
//!
//! ```toml
//! train = "data/sst2/train.jsonl"
//! test = "data/sst2/test.jsonl"
//! setting = "fewshot-up"      # fewshot | fewshot-u | fewshot-up
//! criterion = "pdo"           # pdo | local-e | global-e | oracle | random
//! scoring = "direct"          # direct | pmi
//! prior_from_dev = true
//!
//! [template]
//! input_prefix = "Review:"
//! label_prefix = "Sentiment:"
//!
//! [[labels]]
//! id = "positive"
//! verbalizer = "positive"
//!
//! [[labels]]
//! id = "negative"
//! verbalizer = "negative"
//!
//! [backend]
//! kind = "http"
//! url = "http://localhost:8000/score"
//! model = "opt-1.3b"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunnerError;
use crate::backend::{HttpConfig, MockConfig, PromptTemplate};
use crate::eval::DEFAULT_ECE_BINS;
use crate::label_dist::{Label, LabelSpace};
use crate::scoring::{LogBase, ScoringMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Demos only.
    Fewshot,
    /// Demos plus an unlabeled dev set.
    FewshotU,
    /// Demos, an unlabeled dev set, and a label prior.
    FewshotUp,
}

impl Setting {
    pub fn label(self) -> &'static str {
        match self {
            Setting::Fewshot => "FewShot",
            Setting::FewshotU => "FewShotU",
            Setting::FewshotUp => "FewShotUP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionChoice {
    /// KL-based ordering selection; the variant follows the setting.
    Pdo,
    LocalE,
    GlobalE,
    Oracle,
    Random,
}

impl CriterionChoice {
    pub fn needs_dev(self) -> bool {
        matches!(
            self,
            CriterionChoice::LocalE | CriterionChoice::GlobalE | CriterionChoice::Oracle
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Mock(MockConfig),
    Http(HttpConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock(MockConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Labeled pool supplying demos and the dev sample.
    pub train: PathBuf,
    /// Held-out labeled split the selected orderings are evaluated on.
    pub test: PathBuf,
    /// Name used in reports; defaults to the train file's parent directory or stem.
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default)]
    pub template: PromptTemplate,
    pub labels: Vec<Label>,
    #[serde(default)]
    pub backend: BackendSpec,
    pub setting: Setting,
    #[serde(default)]
    pub scoring: ScoringMethod,
    #[serde(default)]
    pub log_base: LogBase,
    pub criterion: CriterionChoice,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::num_orderings")]
    pub num_orderings: usize,
    #[serde(default = "defaults::keep")]
    pub keep: usize,
    #[serde(default = "defaults::n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "defaults::dev_size")]
    pub dev_size: usize,
    /// Test examples used; `None` means the whole test file.
    #[serde(default)]
    pub test_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Explicit prior over `labels`.
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
    /// Labeled JSONL file whose label frequencies serve as the prior.
    #[serde(default)]
    pub prior_file: Option<PathBuf>,
    /// Estimate the prior from the labels of each seed's dev sample.
    #[serde(default)]
    pub prior_from_dev: bool,
    #[serde(default = "defaults::num_sets")]
    pub num_sets: usize,
    #[serde(default = "defaults::keep_sets")]
    pub keep_sets: usize,
    #[serde(default = "defaults::ece_bins")]
    pub ece_bins: usize,
    /// Evaluate every sampled ordering, not only the selected ones.
    #[serde(default)]
    pub evaluate_all: bool,
    #[serde(default = "defaults::max_in_flight")]
    pub max_in_flight: usize,
}

mod defaults {
    pub fn k() -> usize {
        8
    }
    pub fn num_orderings() -> usize {
        24
    }
    pub fn keep() -> usize {
        4
    }
    pub fn n_seeds() -> usize {
        5
    }
    pub fn dev_size() -> usize {
        256
    }
    pub fn num_sets() -> usize {
        120
    }
    pub fn keep_sets() -> usize {
        20
    }
    pub fn ece_bins() -> usize {
        super::DEFAULT_ECE_BINS
    }
    pub fn max_in_flight() -> usize {
        4
    }
}

impl ExperimentConfig {
    /// Parses a TOML config; relative data paths are resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, RunnerError> {
        toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.train, &mut self.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut self.prior_file {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn label_space(&self) -> Result<LabelSpace, RunnerError> {
        Ok(LabelSpace::new(self.labels.clone())?)
    }

    pub fn dataset_label(&self) -> String {
        if let Some(name) = &self.dataset_name {
            return name.clone();
        }
        self.train
            .parent()
            .and_then(|p| p.file_name())
            .filter(|n| !n.is_empty())
            .or_else(|| self.train.file_stem())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    }

    /// Row label used in report tables, e.g. `PDO (FewShotUP)`.
    pub fn method_label(&self) -> String {
        match self.criterion {
            CriterionChoice::Pdo => format!("PDO ({})", self.setting.label()),
            CriterionChoice::LocalE => "LocalE".into(),
            CriterionChoice::GlobalE => "GlobalE".into(),
            CriterionChoice::Oracle => "Oracle".into(),
            CriterionChoice::Random => "Random".into(),
        }
    }

    pub fn needs_dev(&self) -> bool {
        (self.setting != Setting::Fewshot && self.criterion == CriterionChoice::Pdo)
            || self.criterion.needs_dev()
            || self.prior_from_dev
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let fail = |m: String| Err(RunnerError::Config(m));
        self.label_space()?;
        self.template.validate()?;
        if self.k == 0 {
            return fail("k must be >= 1".into());
        }
        if self.keep == 0 || self.keep > self.num_orderings {
            return fail(format!(
                "need 1 <= keep ({}) <= num_orderings ({})",
                self.keep, self.num_orderings
            ));
        }
        if self.keep_sets == 0 || self.keep_sets > self.num_sets {
            return fail(format!(
                "need 1 <= keep_sets ({}) <= num_sets ({})",
                self.keep_sets, self.num_sets
            ));
        }
        if self.n_seeds == 0 {
            return fail("n_seeds must be >= 1".into());
        }
        if self.ece_bins == 0 {
            return fail("ece_bins must be >= 1".into());
        }
        if self.max_in_flight == 0 {
            return fail("max_in_flight must be >= 1".into());
        }
        if self.setting == Setting::Fewshot && self.criterion.needs_dev() {
            return fail(format!(
                "criterion {:?} needs a dev set, which the fewshot setting does not allow",
                self.criterion
            ));
        }
        let sources = usize::from(self.prior.is_some())
            + usize::from(self.prior_file.is_some())
            + usize::from(self.prior_from_dev);
        if sources > 1 {
            return fail("set at most one of prior, prior_file, prior_from_dev".into());
        }
        match self.setting {
            Setting::FewshotUp if sources == 0 => {
                return fail(
                    "fewshot-up needs a prior: set prior, prior_file, or prior_from_dev".into(),
                )
            }
            Setting::Fewshot | Setting::FewshotU if sources > 0 => {
                return fail(format!(
                    "a prior is only used in the fewshot-up setting, not {:?}",
                    self.setting
                ))
            }
            _ => {}
        }
        if let Some(prior) = &self.prior {
            if prior.len() != self.labels.len() {
                return fail(format!(
                    "prior has {} entries for {} labels",
                    prior.len(),
                    self.labels.len()
                ));
            }
        }
        if self.needs_dev() && self.dev_size == 0 {
            return fail("dev_size must be >= 1 for this setting".into());
        }
        if let BackendSpec::Mock(m) = &self.backend {
            for label in m.keywords.keys() {
                if !self.labels.iter().any(|l| &l.id == label) {
                    return fail(format!("mock keywords name unknown label {label:?}"));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (API keys are never serialized).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
