//! Collective decision scores, per-class threshold calibration and the
//! accept/reject rules.

mod thresholds;

use serde::{Deserialize, Serialize};

pub use thresholds::{
    calibrate, calibrate_from_probs, calibrate_scores, lower_quantile, DecisionThresholds, DEFAULT_QUANTILE, MIN_CALIBRATION_WINDOWS,
    THRESHOLDS_FORMAT, THRESHOLDS_VERSION,
};

use crate::error::{Error, Result};
use crate::numcore::clamp_prob;

/// Fixed posterior threshold used by both baseline rules.
pub const BASELINE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Collective score against calibrated per-class thresholds.
    Collective,
    /// Max softmax posterior above a fixed threshold.
    SoftmaxBaseline,
    /// Max one-vs-rest output above a fixed threshold.
    OvrnMaxBaseline,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Collective => "collective",
            RuleKind::SoftmaxBaseline => "softmax_baseline",
            RuleKind::OvrnMaxBaseline => "ovrn_max_baseline",
        }
    }

    pub fn needs_thresholds(self) -> bool {
        self == RuleKind::Collective
    }
}

impl std::str::FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collective" => Ok(RuleKind::Collective),
            "softmax_baseline" => Ok(RuleKind::SoftmaxBaseline),
            "ovrn_max_baseline" => Ok(RuleKind::OvrnMaxBaseline),
            _ => Err(Error::Config(format!(
                "unknown rule `{s}` (expected collective, softmax_baseline or ovrn_max_baseline)"
            ))),
        }
    }
}

/// Outcome for one window. `winner` is the 0-based argmax class and `score`
/// the value compared against its threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub winner: usize,
    pub score: f64,
    pub accepted: bool,
}

impl Decision {
    /// Predicted 0-based class, or `None` for UNKNOWN.
    pub fn predicted(&self) -> Option<usize> {
        self.accepted.then_some(self.winner)
    }
}

/// `S[k] = log p_k - (1/(K-1)) Σ_{j≠k} log p_j`, on clamped probabilities.
pub fn collective_scores(probs: &[f64]) -> Result<Vec<f64>> {
    let k = probs.len();
    if k < 2 {
        return Err(Error::Invalid(format!("collective scores need at least 2 classes, got {k}")));
    }
    let logs: Vec<f64> = probs.iter().map(|&p| clamp_prob(p).ln()).collect();
    let total: f64 = logs.iter().sum();
    let others = (k - 1) as f64;
    Ok(logs.iter().map(|&l| l - (total - l) / others).collect())
}

/// Index of the largest entry, smallest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    crate::training::argmax(values)
}

/// Collective rule: accept the argmax class iff its score reaches (≥) its
/// threshold.
pub fn decide(scores: &[f64], thresholds: &DecisionThresholds) -> Result<Decision> {
    if scores.len() != thresholds.epsilon.len() {
        return Err(Error::Dimension {
            op: "decide",
            axis: "classes",
            expected: thresholds.epsilon.len(),
            found: scores.len(),
        });
    }
    let winner = argmax(scores);
    let score = scores[winner];
    Ok(Decision {
        winner,
        score,
        accepted: score >= thresholds.epsilon[winner],
    })
}

/// Argmax posterior, accepted iff strictly above `threshold`.
pub fn decide_softmax_baseline(probs: &[f64], threshold: f64) -> Decision {
    decide_max(probs, threshold)
}

/// Argmax one-vs-rest output, accepted iff strictly above `threshold`.
pub fn decide_ovrn_max_baseline(probs: &[f64], threshold: f64) -> Decision {
    decide_max(probs, threshold)
}

fn decide_max(probs: &[f64], threshold: f64) -> Decision {
    let winner = argmax(probs);
    Decision {
        winner,
        score: probs[winner],
        accepted: probs[winner] > threshold,
    }
}

/// Apply `rule` to one probability row.
pub fn decide_with(rule: RuleKind, probs: &[f64], thresholds: Option<&DecisionThresholds>) -> Result<Decision> {
    match rule {
        RuleKind::Collective => {
            let t = thresholds.ok_or_else(|| Error::Invalid("the collective rule needs calibrated thresholds".into()))?;
            decide(&collective_scores(probs)?, t)
        }
        RuleKind::SoftmaxBaseline => Ok(decide_softmax_baseline(probs, BASELINE_THRESHOLD)),
        RuleKind::OvrnMaxBaseline => Ok(decide_ovrn_max_baseline(probs, BASELINE_THRESHOLD)),
    }
}
