//! Language-model backends that score verbalizer tokens.
//!
//! A [`Backend`] answers one question: given a prompt and a list of
//! candidate tokens, what is the log-probability of each candidate as the
//! next token? [`label_distribution`] turns that answer into a
//! [`LabelDist`] by renormalizing over the candidates.

mod cache;
mod http;
mod mock;
mod prompt;

use std::sync::Arc;

use thiserror::Error;

pub use cache::{with_cache, with_counter, CacheStore, CachedBackend, CallCounter, CountingBackend};
pub use http::{HttpBackend, HttpConfig, HttpProtocol, ENV_API_KEY, ENV_BACKEND_URL};
pub use mock::{mock_forward, MockConfig, MockLm};
pub use prompt::{render_prompt, DemoSet, Example, Ordering, PromptTemplate};

use crate::label_dist::{softmax, DistError, LabelDist, LabelSpace};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("malformed backend response: {0}")]
    ProtocolError(String),
    #[error("verbalizer {0:?} is not a single token")]
    TokenizationError(String),
    #[error("bad backend configuration: {0}")]
    BadConfig(String),
    #[error("bad ordering: {0}")]
    BadOrdering(String),
    #[error("invalid demo set: {0}")]
    InvalidDemos(String),
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("corrupt cache record at line {line}: {message}")]
    CacheCorrupt { line: usize, message: String },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("cache I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Next-token log-probabilities for a fixed set of candidate tokens.
///
/// Implementations must be safe to call from several threads at once.
pub trait Backend: Send + Sync {
    /// Stable identity used in cache keys; two backends with the same
    /// identity must return the same scores for the same query.
    fn identity(&self) -> String;

    /// Returns one log-probability per candidate, aligned with `candidates`.
    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError>;
}

impl<T: Backend + ?Sized> Backend for &T {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        (**self).next_token_logprobs(prompt, candidates)
    }
}

impl<T: Backend + ?Sized> Backend for Box<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        (**self).next_token_logprobs(prompt, candidates)
    }
}

impl<T: Backend + ?Sized> Backend for Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        (**self).next_token_logprobs(prompt, candidates)
    }
}

/// Queries `backend` for the label verbalizers and renormalizes over them.
pub fn label_distribution<B: Backend + ?Sized>(
    backend: &B,
    prompt: &str,
    space: &LabelSpace,
) -> Result<LabelDist, BackendError> {
    let candidates = space.verbalizers();
    let log_probs = backend.next_token_logprobs(prompt, &candidates)?;
    dist_from_logprobs(space, &log_probs)
}

pub(crate) fn dist_from_logprobs(
    space: &LabelSpace,
    log_probs: &[f64],
) -> Result<LabelDist, BackendError> {
    if log_probs.len() != space.len() {
        return Err(BackendError::ProtocolError(format!(
            "expected {} log-probs, got {}",
            space.len(),
            log_probs.len()
        )));
    }
    if let Some(v) = log_probs.iter().find(|v| !v.is_finite()) {
        return Err(BackendError::ProtocolError(format!("non-finite log-prob {v}")));
    }
    Ok(softmax(space.id(), log_probs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    struct Fixed(Vec<f64>);

    impl Backend for Fixed {
        fn identity(&self) -> String {
            "fixed".into()
        }

        fn next_token_logprobs(&self, _: &str, _: &[String]) -> Result<Vec<f64>, BackendError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn exp_and_normalize() {
        let space = LabelSpace::from_verbalizers(&["positive", "negative"]).unwrap();
        let d = label_distribution(&Fixed(vec![-0.3567, -1.2040]), "p", &space).unwrap();
        // mpmath oracle: 0.70000044931849...
        assert_abs_diff_eq!(d.probs()[0], 0.7, epsilon = 1e-4);
        assert_abs_diff_eq!(d.probs()[0], 0.700_000_449_318_495, epsilon = 1e-12);
        assert_eq!(d.space(), space.id());
    }

    #[test]
    fn malformed_responses() {
        let space = LabelSpace::from_verbalizers(&["a", "b"]).unwrap();
        let short = label_distribution(&Fixed(vec![-1.0]), "p", &space);
        assert!(matches!(short, Err(BackendError::ProtocolError(_))));
        let nan = label_distribution(&Fixed(vec![-1.0, f64::NAN]), "p", &space);
        assert!(matches!(nan, Err(BackendError::ProtocolError(_))));
    }
}
