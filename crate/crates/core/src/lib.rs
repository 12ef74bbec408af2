//! Ordering and example-set selection for in-context learning.
//!
//! Given a handful of labeled demonstrations and a language model that
//! exposes next-token log-probabilities, this crate samples candidate
//! orderings of the demonstrations, scores each one by how far the model's
//! induced label distribution sits from a reference distribution, and keeps
//! the best. Results are evaluated with accuracy and Expected Calibration
//! Error.
//!
//! Modules, bottom-up:
//!
//! * [`label_dist`] — probability vectors, softmax, entropy, KL divergence.
//! * [`backend`] — prompt rendering and log-prob backends (HTTP, mock,
//!   caching and counting wrappers).
//! * [`scoring`] — Direct and PMI predictions.
//! * [`optimizer`] — ordering sampling, selection criteria, top-m selection,
//!   example-set selection.
//! * [`eval`] — accuracy, ECE, run aggregation and report rendering.
//! * [`runner`] — datasets, priors, configs and the experiment protocol.

pub mod backend;
pub mod eval;
pub mod label_dist;
pub mod optimizer;
pub mod runner;
pub mod scoring;

pub use backend::{
    label_distribution, render_prompt, Backend, BackendError, DemoSet, Example, MockConfig,
    MockLm, Ordering, PromptTemplate,
};
pub use label_dist::{
    entropy, kl_divergence, mean_distribution, normalize, softmax, DistError, Label, LabelDist,
    LabelSpace, SpaceId,
};
pub use scoring::{predict_direct, predict_pmi, LogBase, Prediction, ScoringMethod};
