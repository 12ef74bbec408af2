//! Probability vectors over a fixed, ordered label space.
//!
//! Everything the selection criteria compute reduces to the handful of
//! operations here: normalization, softmax, entropy, KL divergence and
//! entrywise averaging. All quantities are in nats.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Tolerance on `sum(probs) == 1` accepted by [`LabelDist::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Floor applied to the second argument of [`kl_divergence`] before division.
pub const KL_DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("all weights are zero")]
    AllZero,
    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("expected {expected} entries, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("distributions are over different label spaces")]
    SpaceMismatch,
    #[error("empty input")]
    EmptyInput,
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("invalid label space: {0}")]
    InvalidSpace(String),
}

/// Identity of a label space: a content fingerprint plus its size.
///
/// Two distributions can be combined only when their `SpaceId`s are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceId {
    fingerprint: u64,
    len: usize,
}

impl SpaceId {
    /// Identity for bare probability vectors of length `len` that are not
    /// tied to a named label space.
    pub fn anonymous(len: usize) -> Self {
        Self {
            fingerprint: 0,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: String,
    pub verbalizer: String,
}

/// Ordered set of class labels, each verbalized by a single token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<Label>,
    id: SpaceId,
}

impl LabelSpace {
    pub fn new(labels: Vec<Label>) -> Result<Self, DistError> {
        if labels.len() < 2 {
            return Err(DistError::InvalidSpace(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if a.id.is_empty() || a.verbalizer.is_empty() {
                return Err(DistError::InvalidSpace(format!("label {i} has an empty field")));
            }
            for b in &labels[..i] {
                if a.id == b.id {
                    return Err(DistError::InvalidSpace(format!("duplicate label id {:?}", a.id)));
                }
                if a.verbalizer == b.verbalizer {
                    return Err(DistError::InvalidSpace(format!(
                        "duplicate verbalizer {:?}",
                        a.verbalizer
                    )));
                }
            }
        }

        let mut hasher = Sha256::new();
        for label in &labels {
            hasher.update(label.id.as_bytes());
            hasher.update([0u8]);
            hasher.update(label.verbalizer.as_bytes());
            hasher.update([0xffu8]);
        }
        let digest = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        // Zero is reserved for anonymous spaces.
        let fingerprint = u64::from_le_bytes(head).max(1);

        let id = SpaceId {
            fingerprint,
            len: labels.len(),
        };
        Ok(Self { labels, id })
    }

    /// Builds a space whose label ids double as verbalizers.
    pub fn from_verbalizers<S: AsRef<str>>(names: &[S]) -> Result<Self, DistError> {
        Self::new(
            names
                .iter()
                .map(|n| Label {
                    id: n.as_ref().to_string(),
                    verbalizer: n.as_ref().to_string(),
                })
                .collect(),
        )
    }

    pub fn id(&self) -> SpaceId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &Label {
        &self.labels[index]
    }

    pub fn index_of(&self, label_id: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.id == label_id)
    }

    pub fn verbalizers(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.verbalizer.clone()).collect()
    }

    pub fn uniform(&self) -> LabelDist {
        LabelDist::uniform(self.id)
    }
}

/// A normalized probability vector indexed positionally by a [`LabelSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDist {
    probs: Vec<f64>,
    space: SpaceId,
}

impl LabelDist {
    /// Validates an already-normalized vector.
    pub fn new(space: SpaceId, probs: Vec<f64>) -> Result<Self, DistError> {
        check_len(space, probs.len())?;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(DistError::NonFinite(index));
            }
            if value < 0.0 {
                return Err(DistError::NegativeWeight { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::NotNormalized(sum));
        }
        Ok(Self { probs, space })
    }

    /// Shorthand for an anonymous-space distribution; mostly useful in tests.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, DistError> {
        Self::new(SpaceId::anonymous(probs.len()), probs)
    }

    pub fn uniform(space: SpaceId) -> Self {
        let n = space.len();
        Self {
            probs: vec![1.0 / n as f64; n],
            space,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn space(&self) -> SpaceId {
        self.space
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

impl fmt::Display for LabelDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.probs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{p:.4}")?;
        }
        write!(f, ")")
    }
}

fn check_len(space: SpaceId, actual: usize) -> Result<(), DistError> {
    if space.len() != actual {
        return Err(DistError::LengthMismatch {
            expected: space.len(),
            actual,
        });
    }
    Ok(())
}

fn check_same(p: &LabelDist, q: &LabelDist) -> Result<(), DistError> {
    if p.space != q.space {
        return Err(DistError::SpaceMismatch);
    }
    Ok(())
}

/// Scales nonnegative weights to sum to one.
pub fn normalize(space: SpaceId, weights: &[f64]) -> Result<LabelDist, DistError> {
    check_len(space, weights.len())?;
    for (index, &value) in weights.iter().enumerate() {
        if !value.is_finite() {
            return Err(DistError::NonFinite(index));
        }
        if value < 0.0 {
            return Err(DistError::NegativeWeight { index, value });
        }
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(DistError::AllZero);
    }
    Ok(LabelDist {
        probs: weights.iter().map(|w| w / total).collect(),
        space,
    })
}

/// Natural-base softmax, computed with the max-shift for stability.
pub fn softmax(space: SpaceId, scores: &[f64]) -> Result<LabelDist, DistError> {
    check_len(space, scores.len())?;
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(DistError::NonFinite(index));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(LabelDist {
        probs: exps.into_iter().map(|e| e / total).collect(),
        space,
    })
}

/// `KL(p || q)` in nats.
///
/// Entries of `q` are floored at [`KL_DENOMINATOR_FLOOR`]; terms with
/// `p_i = 0` are skipped.
pub fn kl_divergence(p: &LabelDist, q: &LabelDist) -> Result<f64, DistError> {
    check_same(p, q)?;
    let kl: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_DENOMINATOR_FLOOR)).ln())
        .sum();
    // Rounding can leave a tiny negative residue when p ~= q.
    Ok(kl.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &LabelDist) -> f64 {
    -p.probs
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * pi.ln())
        .sum::<f64>()
}

/// Entrywise arithmetic mean of distributions over one space.
pub fn mean_distribution(dists: &[LabelDist]) -> Result<LabelDist, DistError> {
    let first = dists.first().ok_or(DistError::EmptyInput)?;
    let mut acc = vec![0.0; first.len()];
    for d in dists {
        check_same(first, d)?;
        for (a, p) in acc.iter_mut().zip(&d.probs) {
            *a += p;
        }
    }
    let n = dists.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(LabelDist {
        probs: acc,
        space: first.space,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn anon(n: usize) -> SpaceId {
        SpaceId::anonymous(n)
    }

    fn dist(p: &[f64]) -> LabelDist {
        LabelDist::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(anon(2), &[1.0, 1.0]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(normalize(anon(2), &[2.0, 0.0]).unwrap().probs(), &[1.0, 0.0]);
        let d = normalize(anon(4), &[3.0, 1.0, 1.0, 5.0]).unwrap();
        for (a, b) in d.probs().iter().zip([0.3, 0.1, 0.1, 0.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn normalize_errors() {
        assert_eq!(normalize(anon(2), &[0.0, 0.0]), Err(DistError::AllZero));
        assert!(matches!(
            normalize(anon(2), &[1.0, -0.5]),
            Err(DistError::NegativeWeight { index: 1, .. })
        ));
        assert!(matches!(
            normalize(anon(3), &[1.0, 1.0]),
            Err(DistError::LengthMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn softmax_examples() {
        let d = softmax(anon(3), &[0.0, 0.0, 0.0]).unwrap();
        for p in d.probs() {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        for c in [-50.0, 0.0, 3.7, 700.0] {
            let d = softmax(anon(2), &[c, c + 3f64.ln()]).unwrap();
            assert_abs_diff_eq!(d.probs()[0], 0.25, epsilon = 1e-12);
            assert_abs_diff_eq!(d.probs()[1], 0.75, epsilon = 1e-12);
        }
        // mpmath oracle: (0.844828147186..., 0.155171852813...)
        let d = softmax(anon(2), &[0.8473, -0.8473]).unwrap();
        assert_abs_diff_eq!(d.probs()[0], 0.8448, epsilon = 1e-3);
        assert_abs_diff_eq!(d.probs()[0], 0.844_828_147_186_593_9, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert_eq!(softmax(anon(2), &[0.0, f64::NAN]), Err(DistError::NonFinite(1)));
        assert_eq!(
            softmax(anon(2), &[f64::NEG_INFINITY, 0.0]),
            Err(DistError::NonFinite(0))
        );
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.2, 0.5, 0.3]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        // mpmath oracle: 0.082282878505051846...
        let kl = kl_divergence(&dist(&[0.7, 0.3]), &dist(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(kl, 0.082_282_878_505_051_85, epsilon = 1e-12);
        // mpmath oracle: 0.121777274287168660...
        let kl = kl_divergence(&dist(&[0.25; 4]), &dist(&[0.4, 0.3, 0.2, 0.1])).unwrap();
        assert_abs_diff_eq!(kl, 0.121_777_274_287_168_66, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_denominator_is_finite() {
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap();
        assert!(kl.is_finite());
        assert_abs_diff_eq!(kl, 0.5 * (0.5f64).ln() + 0.5 * (0.5 / 1e-12f64).ln(), epsilon = 1e-9);
        // p_i = 0 terms are skipped rather than clamped
        let kl = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert_abs_diff_eq!(kl, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn kl_space_mismatch() {
        let a = LabelSpace::from_verbalizers(&["a", "b"]).unwrap();
        let b = LabelSpace::from_verbalizers(&["c", "d"]).unwrap();
        assert_eq!(
            kl_divergence(&a.uniform(), &b.uniform()),
            Err(DistError::SpaceMismatch)
        );
        assert_eq!(
            kl_divergence(&a.uniform(), &LabelDist::uniform(anon(2))),
            Err(DistError::SpaceMismatch)
        );
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&dist(&[1.0, 0.0])), 0.0);
        assert_abs_diff_eq!(entropy(&dist(&[0.25; 4])), 4f64.ln(), epsilon = 1e-15);
        // mpmath oracle: 0.610864302054893463...
        assert_abs_diff_eq!(
            entropy(&dist(&[0.7, 0.3])),
            0.610_864_302_054_893_5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mean_examples() {
        assert_eq!(
            mean_distribution(&[dist(&[0.6, 0.4])]).unwrap().probs(),
            &[0.6, 0.4]
        );
        assert_eq!(
            mean_distribution(&[dist(&[1.0, 0.0]), dist(&[0.0, 1.0])])
                .unwrap()
                .probs(),
            &[0.5, 0.5]
        );
        let m = mean_distribution(&[dist(&[0.9, 0.1]), dist(&[0.5, 0.5]), dist(&[0.1, 0.9])])
            .unwrap();
        assert_abs_diff_eq!(m.probs()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.probs()[1], 0.5, epsilon = 1e-15);
        assert_eq!(mean_distribution(&[]), Err(DistError::EmptyInput));
    }

    #[test]
    fn label_space_validation() {
        assert!(LabelSpace::from_verbalizers(&["only"]).is_err());
        assert!(LabelSpace::from_verbalizers(&["a", "a"]).is_err());
        let dup_verb = LabelSpace::new(vec![
            Label {
                id: "x".into(),
                verbalizer: "v".into(),
            },
            Label {
                id: "y".into(),
                verbalizer: "v".into(),
            },
        ]);
        assert!(dup_verb.is_err());
        let s = LabelSpace::from_verbalizers(&["negative", "positive"]).unwrap();
        assert_eq!(s.index_of("positive"), Some(1));
        assert_ne!(s.id(), SpaceId::anonymous(2));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(dist(&[0.5, 0.5]).argmax(), 0);
        assert_eq!(dist(&[0.2, 0.4, 0.4]).argmax(), 1);
    }
}
