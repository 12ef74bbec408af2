//! Deterministic synthetic language model with a tunable recency bias.
//!
//! The logit of label `y` is
//!
//! ```text
//! alpha * (# of y's keywords in the query) + beta * sum_i decay^(k - i) * [label(demo_i) = y]
//! ```
//!
//! where demo `k` is the one rendered last. The first term is the evidence
//! carried by the input; the second is a context bias that grows with how
//! recently each label was shown. A null query contributes no evidence.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, DemoSet, Ordering, PromptTemplate};
use crate::label_dist::{softmax, LabelDist, LabelSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Keywords per label id. Labels without an entry have no keywords.
    #[serde(default)]
    pub keywords: BTreeMap<String, Vec<String>>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "half")]
    pub decay: f64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            keywords: BTreeMap::new(),
            alpha: 1.0,
            beta: 1.0,
            decay: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockLm {
    alpha: f64,
    beta: f64,
    decay: f64,
    keywords: Vec<HashSet<String>>,
    space: LabelSpace,
    template: PromptTemplate,
}

impl MockLm {
    pub fn new(
        config: &MockConfig,
        space: &LabelSpace,
        template: &PromptTemplate,
    ) -> Result<Self, BackendError> {
        if !config.alpha.is_finite() || config.alpha <= 0.0 {
            return Err(BackendError::BadConfig(format!(
                "alpha must be > 0, got {}",
                config.alpha
            )));
        }
        if !config.beta.is_finite() || config.beta < 0.0 {
            return Err(BackendError::BadConfig(format!(
                "beta must be >= 0, got {}",
                config.beta
            )));
        }
        if !(config.decay > 0.0 && config.decay < 1.0) {
            return Err(BackendError::BadConfig(format!(
                "decay must be in (0, 1), got {}",
                config.decay
            )));
        }
        template.validate()?;
        let mut keywords = vec![HashSet::new(); space.len()];
        for (label, words) in &config.keywords {
            let index = space
                .index_of(label)
                .ok_or_else(|| BackendError::UnknownLabel(label.clone()))?;
            keywords[index] = words.iter().map(|w| w.to_lowercase()).collect();
        }
        Ok(Self {
            alpha: config.alpha,
            beta: config.beta,
            decay: config.decay,
            keywords,
            space: space.clone(),
            template: template.clone(),
        })
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    /// Logits given the label indices of the demos in rendered order.
    pub fn logits(&self, demo_labels: &[usize], query: Option<&str>) -> Vec<f64> {
        let mut logits = vec![0.0; self.space.len()];
        if let Some(text) = query {
            for token in tokenize(text) {
                for (y, words) in self.keywords.iter().enumerate() {
                    if words.contains(&token) {
                        logits[y] += self.alpha;
                    }
                }
            }
        }
        let k = demo_labels.len();
        for (i, &y) in demo_labels.iter().enumerate() {
            logits[y] += self.beta * self.decay.powi((k - 1 - i) as i32);
        }
        logits
    }

    pub fn forward(&self, demo_labels: &[usize], query: Option<&str>) -> LabelDist {
        softmax(self.space.id(), &self.logits(demo_labels, query))
            .expect("mock logits are finite")
    }

    /// Recovers demo labels and query text from a prompt rendered with this
    /// mock's template and label space.
    fn parse_prompt(&self, prompt: &str) -> Result<(Vec<usize>, String), BackendError> {
        let t = &self.template;
        let input_head = format!("{} ", t.input_prefix);
        let label_head = format!("{}{}", t.field_separator, t.label_prefix);
        let malformed = || BackendError::ProtocolError("mock cannot parse prompt".into());

        let mut labels = Vec::new();
        let mut rest = prompt;
        loop {
            rest = rest.strip_prefix(input_head.as_str()).ok_or_else(malformed)?;
            let mut search_from = 0;
            loop {
                let at = rest[search_from..]
                    .find(label_head.as_str())
                    .map(|i| i + search_from)
                    .ok_or_else(malformed)?;
                let after = &rest[at + label_head.len()..];
                if after.is_empty() {
                    return Ok((labels, rest[..at].to_string()));
                }
                let demo = after.strip_prefix(' ').and_then(|tail| {
                    self.space.labels().iter().enumerate().find_map(|(y, l)| {
                        tail.strip_prefix(l.verbalizer.as_str())
                            .and_then(|r| r.strip_prefix(t.demo_separator.as_str()))
                            .filter(|r| r.starts_with(input_head.as_str()))
                            .map(|r| (y, r))
                    })
                });
                match demo {
                    Some((y, remainder)) => {
                        labels.push(y);
                        rest = remainder;
                        break;
                    }
                    None => search_from = at + label_head.len(),
                }
            }
        }
    }
}

/// Lowercased alphanumeric tokens.
fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Evaluates the mock directly from structured inputs, bypassing prompt text.
pub fn mock_forward(
    mock: &MockLm,
    demos: &DemoSet,
    ordering: &Ordering,
    query: Option<&str>,
) -> Result<LabelDist, BackendError> {
    if ordering.len() != demos.k() {
        return Err(BackendError::BadOrdering(format!(
            "ordering has {} entries for {} demos",
            ordering.len(),
            demos.k()
        )));
    }
    let labels = ordering
        .apply(demos)
        .map(|d| {
            let id = d.label.as_deref().unwrap_or_default();
            mock.space
                .index_of(id)
                .ok_or_else(|| BackendError::UnknownLabel(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mock.forward(&labels, query))
}

impl Backend for MockLm {
    fn identity(&self) -> String {
        let mut kw: Vec<String> = self
            .keywords
            .iter()
            .map(|set| {
                let mut words: Vec<&String> = set.iter().collect();
                words.sort();
                words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(",")
            })
            .collect();
        kw.insert(0, format!("{:?}", self.space.verbalizers()));
        format!(
            "mock(alpha={},beta={},decay={};{})",
            self.alpha,
            self.beta,
            self.decay,
            kw.join(";")
        )
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let (labels, query) = self.parse_prompt(prompt)?;
        let logits = self.logits(&labels, Some(&query));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        candidates
            .iter()
            .map(|c| {
                self.space
                    .labels()
                    .iter()
                    .position(|l| &l.verbalizer == c)
                    .map(|y| logits[y] - log_norm)
                    .ok_or_else(|| BackendError::TokenizationError(c.clone()))
            })
            .collect()
    }
}
