use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::collective_scores;
use crate::datapipe::{ClassMap, WindowSet};
use crate::error::{Error, Result};
use crate::modelzoo::Model;
use crate::numcore::Tensor;
use crate::training::class_labels;

pub const DEFAULT_QUANTILE: f64 = 0.05;
pub const MIN_CALIBRATION_WINDOWS: usize = 20;
pub const THRESHOLDS_FORMAT: &str = "openset-thresholds";
pub const THRESHOLDS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionThresholds {
    /// Per-class score cutoff, indexed by 0-based class.
    pub epsilon: Vec<f64>,
    /// Fraction of each class's calibration scores allowed below its cutoff.
    pub quantile: f64,
    /// Calibration windows per class.
    pub counts: Vec<usize>,
    /// State id of every class, for display.
    pub class_ids: Vec<i64>,
    /// Hash of the model and calibration data the cutoffs came from.
    pub fingerprint: String,
}

/// Lower-interpolated cutoff: the largest observed score that still keeps
/// at least `1 - quantile` of `scores` at or above it.
pub fn lower_quantile(scores: &[f64], quantile: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to take a quantile of".into()));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Config(format!("quantile must lie in (0, 1), got {quantile}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Tolerance keeps e.g. 0.95 * 100 from rounding up to 96.
    let keep = ((1.0 - quantile) * n as f64 - 1e-9).ceil() as usize;
    Ok(sorted[n - keep.clamp(1, n)])
}

/// Thresholds from per-class score lists (`scores[k]` holds `S[k]` of every
/// calibration window of class `k`).
pub fn calibrate_scores(scores: &[Vec<f64>], quantile: f64, classes: &ClassMap) -> Result<DecisionThresholds> {
    if scores.len() != classes.len() {
        return Err(Error::Dimension {
            op: "calibrate",
            axis: "classes",
            expected: classes.len(),
            found: scores.len(),
        });
    }
    let mut epsilon = Vec::with_capacity(scores.len());
    for (k, s) in scores.iter().enumerate() {
        if s.len() < MIN_CALIBRATION_WINDOWS {
            return Err(Error::Calibration {
                class: classes.label_of(k).to_string(),
                count: s.len(),
                required: MIN_CALIBRATION_WINDOWS,
            });
        }
        epsilon.push(lower_quantile(s, quantile)?);
    }
    Ok(DecisionThresholds {
        epsilon,
        quantile,
        counts: scores.iter().map(Vec::len).collect(),
        class_ids: classes.ids().to_vec(),
        fingerprint: String::new(),
    })
}

/// Group collective scores by true class: entry `k` holds `S[k]` for every
/// row labelled `k`.
pub(crate) fn scores_by_class(probs: &Tensor, labels: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(collective_scores(probs.row(i))?[y]);
    }
    Ok(out)
}

/// Calibrate per-class thresholds on labelled, normalised training windows.
pub fn calibrate(model: &Model, windows: &WindowSet, quantile: f64, batch_size: usize) -> Result<DecisionThresholds> {
    let classes = model
        .classes
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no class map; train it first".into()))?;
    let probs = model.predict_proba(windows, batch_size)?;
    calibrate_from_probs(model, &probs, windows, classes, quantile)
}

/// [`calibrate`] from precomputed probabilities of `windows`.
pub fn calibrate_from_probs(
    model: &Model,
    probs: &Tensor,
    windows: &WindowSet,
    classes: &ClassMap,
    quantile: f64,
) -> Result<DecisionThresholds> {
    let labels = class_labels(windows, classes)?;
    let scores = scores_by_class(probs, &labels, classes.len())?;
    let mut t = calibrate_scores(&scores, quantile, classes)?;
    let mut h = Sha256::new();
    h.update(model.fingerprint().as_bytes());
    h.update(windows.fingerprint().as_bytes());
    t.fingerprint = hex::encode(&h.finalize()[..16]);
    Ok(t)
}

#[derive(Serialize, Deserialize)]
struct ThresholdFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    thresholds: DecisionThresholds,
}

impl DecisionThresholds {
    /// Fraction of `scores` at or above the cutoff of class `k`.
    pub fn acceptance(&self, k: usize, scores: &[f64]) -> f64 {
        scores.iter().filter(|&&s| s >= self.epsilon[k]).count() as f64 / scores.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ThresholdFile {
            format: THRESHOLDS_FORMAT.into(),
            version: THRESHOLDS_VERSION,
            thresholds: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != THRESHOLDS_FORMAT {
            return Err(Error::Invalid(format!("not a thresholds file (format `{format}`)")));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != THRESHOLDS_VERSION {
            return Err(Error::Version {
                kind: "thresholds",
                found: version,
                expected: THRESHOLDS_VERSION,
            });
        }
        let file: ThresholdFile = serde_json::from_value(raw)?;
        Ok(file.thresholds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Tab-separated table: state id, cutoff, quantile, calibration count.
    pub fn to_table(&self) -> String {
        let mut out = String::from("class\tepsilon\tquantile\tcount\n");
        for (k, eps) in self.epsilon.iter().enumerate() {
            let id = self.class_ids.get(k).map_or_else(|| (k + 1).to_string(), i64::to_string);
            writeln!(out, "{id}\t{eps}\t{}\t{}", self.quantile, self.counts[k]).unwrap();
        }
        out
    }
}
