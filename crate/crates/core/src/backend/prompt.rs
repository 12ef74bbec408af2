//! Examples, demo sets, orderings, and the minimal prompt template.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::label_dist::LabelSpace;

/// One input text, optionally labeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Example {
    pub fn labeled(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: Some(label.into()),
        }
    }

    pub fn unlabeled(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: None,
        }
    }
}

/// The k labeled in-context examples, in canonical storage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSet {
    demos: Vec<Example>,
}

impl DemoSet {
    pub fn new(demos: Vec<Example>) -> Result<Self, BackendError> {
        if demos.is_empty() {
            return Err(BackendError::InvalidDemos("demo set is empty".into()));
        }
        if let Some(i) = demos.iter().position(|d| d.label.is_none()) {
            return Err(BackendError::InvalidDemos(format!("demo {i} has no label")));
        }
        if let Some(i) = demos.iter().position(|d| d.text.trim().is_empty()) {
            return Err(BackendError::InvalidDemos(format!("demo {i} has empty text")));
        }
        Ok(Self { demos })
    }

    pub fn k(&self) -> usize {
        self.demos.len()
    }

    pub fn demos(&self) -> &[Example] {
        &self.demos
    }

    /// Label ids of the demos, in canonical order.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.demos.iter().map(|d| d.label.as_deref().unwrap_or_default())
    }
}

/// A permutation of demo indices; position 0 is rendered first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Ordering(Vec<usize>);

impl Ordering {
    pub fn new(perm: Vec<usize>) -> Result<Self, BackendError> {
        let mut seen = vec![false; perm.len()];
        for &i in &perm {
            if i >= perm.len() || seen[i] {
                return Err(BackendError::BadOrdering(format!(
                    "{perm:?} is not a permutation of 0..{}",
                    perm.len()
                )));
            }
            seen[i] = true;
        }
        Ok(Self(perm))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Demos in this ordering's sequence.
    pub fn apply<'a>(&'a self, demos: &'a DemoSet) -> impl Iterator<Item = &'a Example> + 'a {
        self.0.iter().map(move |&i| &demos.demos[i])
    }
}

impl TryFrom<Vec<usize>> for Ordering {
    type Error = BackendError;

    fn try_from(perm: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(perm)
    }
}

impl From<Ordering> for Vec<usize> {
    fn from(o: Ordering) -> Self {
        o.0
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Minimal template: `<input_prefix> <text><field_sep><label_prefix> <verbalizer>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub input_prefix: String,
    pub label_prefix: String,
    #[serde(default = "newline")]
    pub field_separator: String,
    #[serde(default = "newline")]
    pub demo_separator: String,
}

fn newline() -> String {
    "\n".to_string()
}

impl PromptTemplate {
    pub fn new(input_prefix: impl Into<String>, label_prefix: impl Into<String>) -> Self {
        Self {
            input_prefix: input_prefix.into(),
            label_prefix: label_prefix.into(),
            field_separator: newline(),
            demo_separator: newline(),
        }
    }

    /// `Review: [INPUT]\nSentiment: [LABEL]`, used for the sentiment datasets.
    pub fn sentiment() -> Self {
        Self::new("Review:", "Sentiment:")
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.input_prefix.is_empty() || self.label_prefix.is_empty() {
            return Err(BackendError::BadConfig(
                "template prefixes must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::sentiment()
    }
}

/// Renders the demos in `ordering` followed by the query block.
///
/// A `None` query renders the null input: the query text becomes the empty
/// string and the rest of the template is left intact. The prompt always
/// ends at the label prefix so that the next token is the label.
pub fn render_prompt(
    template: &PromptTemplate,
    space: &LabelSpace,
    demos: &DemoSet,
    ordering: &Ordering,
    query: Option<&str>,
) -> Result<String, BackendError> {
    template.validate()?;
    if ordering.len() != demos.k() {
        return Err(BackendError::BadOrdering(format!(
            "ordering has {} entries for {} demos",
            ordering.len(),
            demos.k()
        )));
    }

    let mut out = String::new();
    for demo in ordering.apply(demos) {
        let label_id = demo.label.as_deref().unwrap_or_default();
        let index = space
            .index_of(label_id)
            .ok_or_else(|| BackendError::UnknownLabel(label_id.to_string()))?;
        out.push_str(&template.input_prefix);
        out.push(' ');
        out.push_str(&demo.text);
        out.push_str(&template.field_separator);
        out.push_str(&template.label_prefix);
        out.push(' ');
        out.push_str(&space.label(index).verbalizer);
        out.push_str(&template.demo_separator);
    }
    out.push_str(&template.input_prefix);
    out.push(' ');
    out.push_str(query.unwrap_or(""));
    out.push_str(&template.field_separator);
    out.push_str(&template.label_prefix);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sst2() -> LabelSpace {
        LabelSpace::from_verbalizers(&["positive", "negative"]).unwrap()
    }

    #[test]
    fn renders_sentiment_layout() {
        let demos = DemoSet::new(vec![Example::labeled("great movie", "positive")]).unwrap();
        let prompt = render_prompt(
            &PromptTemplate::sentiment(),
            &sst2(),
            &demos,
            &Ordering::identity(1),
            Some("dull plot"),
        )
        .unwrap();
        assert_eq!(
            prompt,
            "Review: great movie\nSentiment: positive\nReview: dull plot\nSentiment:"
        );
    }

    #[test]
    fn null_query_keeps_trailing_space() {
        let demos = DemoSet::new(vec![Example::labeled("great movie", "positive")]).unwrap();
        let prompt = render_prompt(
            &PromptTemplate::sentiment(),
            &sst2(),
            &demos,
            &Ordering::identity(1),
            None,
        )
        .unwrap();
        assert_eq!(
            prompt,
            "Review: great movie\nSentiment: positive\nReview: \nSentiment:"
        );
    }

    #[test]
    fn ordering_controls_sequence() {
        let demos = DemoSet::new(vec![
            Example::labeled("a", "positive"),
            Example::labeled("b", "negative"),
        ])
        .unwrap();
        let t = PromptTemplate::sentiment();
        let rev = Ordering::new(vec![1, 0]).unwrap();
        let prompt = render_prompt(&t, &sst2(), &demos, &rev, Some("q")).unwrap();
        assert_eq!(
            prompt,
            "Review: b\nSentiment: negative\nReview: a\nSentiment: positive\nReview: q\nSentiment:"
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DemoSet::new(vec![]).is_err());
        assert!(DemoSet::new(vec![Example::unlabeled("x")]).is_err());
        assert!(Ordering::new(vec![0, 0]).is_err());
        assert!(Ordering::new(vec![0, 2]).is_err());

        let demos = DemoSet::new(vec![Example::labeled("a", "positive")]).unwrap();
        let t = PromptTemplate::sentiment();
        let err = render_prompt(&t, &sst2(), &demos, &Ordering::identity(2), None);
        assert!(matches!(err, Err(BackendError::BadOrdering(_))));

        let demos = DemoSet::new(vec![Example::labeled("a", "meh")]).unwrap();
        let err = render_prompt(&t, &sst2(), &demos, &Ordering::identity(1), None);
        assert!(matches!(err, Err(BackendError::UnknownLabel(_))));
    }

    #[test]
    fn ordering_serde_validates() {
        let o: Ordering = serde_json::from_str("[2,0,1]").unwrap();
        assert_eq!(o.as_slice(), &[2, 0, 1]);
        assert!(serde_json::from_str::<Ordering>("[1,1]").is_err());
    }
}
