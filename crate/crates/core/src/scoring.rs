//! Direct and PMI scoring of backend label distributions.

use serde::{Deserialize, Serialize};

use crate::label_dist::{softmax, DistError, LabelDist, LabelSpace, KL_DENOMINATOR_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMethod {
    #[default]
    Direct,
    Pmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    Natural,
    #[default]
    Two,
}

impl LogBase {
    fn ln_base(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Two => std::f64::consts::LN_2,
        }
    }
}

/// A predicted label with its confidence and the distribution it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Position of the predicted label in the label space.
    pub label: usize,
    pub confidence: f64,
    pub dist: LabelDist,
}

impl Prediction {
    fn from_dist(dist: LabelDist) -> Self {
        let label = dist.argmax();
        Self {
            label,
            confidence: dist.probs()[label],
            dist,
        }
    }

    pub fn label_id<'a>(&self, space: &'a LabelSpace) -> &'a str {
        &space.label(self.label).id
    }
}

/// Argmax of the model's own label distribution; ties go to the lowest index.
pub fn predict_direct(dist_x: &LabelDist) -> Prediction {
    Prediction::from_dist(dist_x.clone())
}

/// Scores each label by `log(P(y|x) / P(y|null))` in `base`.
///
/// The returned distribution (used for calibration) is the natural-base
/// softmax of those scores.
pub fn predict_pmi(
    dist_x: &LabelDist,
    dist_null: &LabelDist,
    base: LogBase,
) -> Result<Prediction, DistError> {
    if dist_x.space() != dist_null.space() {
        return Err(DistError::SpaceMismatch);
    }
    let ln_base = base.ln_base();
    let scores: Vec<f64> = dist_x
        .probs()
        .iter()
        .zip(dist_null.probs())
        .map(|(&px, &pn)| {
            // Clamp both sides so a zero numerator stays finite as well.
            let px = px.max(KL_DENOMINATOR_FLOOR);
            let pn = pn.max(KL_DENOMINATOR_FLOOR);
            (px / pn).ln() / ln_base
        })
        .collect();
    let dist = softmax(dist_x.space(), &scores)?;
    // Label comes from the scores themselves so base rounding cannot flip it.
    let mut label = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[label] {
            label = i;
        }
    }
    Ok(Prediction {
        label,
        confidence: dist.probs()[label],
        dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(p: &[f64]) -> LabelDist {
        LabelDist::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn direct_examples() {
        let p = predict_direct(&dist(&[0.7, 0.3]));
        assert_eq!((p.label, p.confidence), (0, 0.7));
        assert_eq!(predict_direct(&dist(&[0.5, 0.5])).label, 0);
        let p = predict_direct(&dist(&[0.1, 0.2, 0.7]));
        assert_eq!((p.label, p.confidence), (2, 0.7));
    }

    #[test]
    fn pmi_worked_example_base_two() {
        let p = predict_pmi(&dist(&[0.7, 0.3]), &dist(&[0.3, 0.7]), LogBase::Two).unwrap();
        assert_eq!(p.label, 0);
        assert_abs_diff_eq!(p.dist.probs()[0], 0.92, epsilon = 0.005);
        assert_abs_diff_eq!(p.dist.probs()[1], 0.08, epsilon = 0.005);
        // mpmath oracle: 0.920179239009714873...
        assert_abs_diff_eq!(p.confidence, 0.920_179_239_009_714_9, epsilon = 1e-12);
    }

    #[test]
    fn pmi_worked_example_natural() {
        let p = predict_pmi(&dist(&[0.7, 0.3]), &dist(&[0.3, 0.7]), LogBase::Natural).unwrap();
        // exact value 49/58
        assert_abs_diff_eq!(p.confidence, 49.0 / 58.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.confidence, 0.8448, epsilon = 1e-3);
    }

    #[test]
    fn uniform_null_natural_recovers_dist_x() {
        let x = dist(&[0.2, 0.5, 0.3]);
        let u = LabelDist::uniform(x.space());
        let p = predict_pmi(&x, &u, LogBase::Natural).unwrap();
        for (a, b) in p.dist.probs().iter().zip(x.probs()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        // base two sharpens but keeps the label
        let p2 = predict_pmi(&x, &u, LogBase::Two).unwrap();
        assert_eq!(p2.label, 1);
        assert!(p2.confidence > 0.5);
    }

    #[test]
    fn space_mismatch() {
        let err = predict_pmi(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5]), LogBase::Two);
        assert_eq!(err, Err(DistError::SpaceMismatch));
    }

    #[test]
    fn zero_null_entry_stays_finite() {
        let p = predict_pmi(&dist(&[0.6, 0.4]), &dist(&[1.0, 0.0]), LogBase::Two).unwrap();
        assert_eq!(p.label, 1);
        assert!(p.confidence.is_finite());
    }
}
