use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{ClassMap, RawRun, StateLabel, WindowSet};
use crate::decision::{collective_scores, decide_with, Decision, DecisionThresholds, RuleKind};
use crate::error::{Error, Result};
use crate::modelzoo::Model;
use crate::numcore::Tensor;

pub const HISTOGRAM_BINS: usize = 50;

/// Binned winning scores, split by whether the window's true state is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub known: Vec<u64>,
    pub unknown: Vec<u64>,
}

impl ScoreHistogram {
    /// Uniform bins over the pooled range of both populations.
    pub fn build(known: &[f64], unknown: &[f64], bins: usize) -> Self {
        let all = known.iter().chain(unknown);
        let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        } else if hi <= lo {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let count = |values: &[f64]| {
            let mut c = vec![0u64; bins];
            for &v in values {
                let b = (((v - lo) / width).floor() as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        };
        ScoreHistogram {
            known: count(known),
            unknown: count(unknown),
            edges,
        }
    }

    /// CSV with one row per bin: `lower,upper,known,unknown`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,known,unknown\n");
        for b in 0..self.known.len() {
            writeln!(out, "{},{},{},{}", self.edges[b], self.edges[b + 1], self.known[b], self.unknown[b]).unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model: String,
    pub model_fingerprint: String,
    pub thresholds_fingerprint: Option<String>,
    /// Hash of the probability matrix the decisions were made from.
    pub probability_hash: String,
    pub seed: Option<u64>,
}

/// Open-set metrics for one model, rule and test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rule: RuleKind,
    /// State id of each known class, in class-index order.
    pub class_ids: Vec<i64>,
    /// Accuracy per known class; `None` when the test set has no window of
    /// that class.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Unknown-rejection rate (UFC): fraction of unknown-state windows
    /// predicted UNKNOWN.
    pub ufc: Option<f64>,
    pub mean_known_accuracy: Option<f64>,
    pub overall_accuracy: f64,
    /// `(K+1) x (K+1)` counts, rows are truth and columns predictions; the
    /// last row and column stand for UNKNOWN.
    pub confusion: Vec<Vec<u64>>,
    pub histogram: ScoreHistogram,
    pub windows: usize,
    pub metadata: ReportMetadata,
}

/// Ground-truth class index of a test window: known states map to their
/// class, every other state (including the UNKNOWN literal) to `K`.
pub fn truth_index(state: StateLabel, classes: &ClassMap) -> usize {
    classes.index_of(state).unwrap_or(classes.len())
}

impl EvaluationReport {
    /// Tally decisions against ground truth (`truth[i] == K` means unknown).
    pub fn tally(
        rule: RuleKind,
        class_ids: &[i64],
        truth: &[usize],
        decisions: &[Decision],
        metadata: ReportMetadata,
    ) -> Result<Self> {
        let k = class_ids.len();
        if truth.len() != decisions.len() {
            return Err(Error::Dimension {
                op: "tally",
                axis: "windows",
                expected: truth.len(),
                found: decisions.len(),
            });
        }
        let mut confusion = vec![vec![0u64; k + 1]; k + 1];
        let (mut known_scores, mut unknown_scores) = (Vec::new(), Vec::new());
        for (&t, d) in truth.iter().zip(decisions) {
            if t > k || d.winner >= k {
                return Err(Error::Invalid(format!("class index out of range for K = {k}")));
            }
            confusion[t][d.predicted().unwrap_or(k)] += 1;
            if t == k {
                unknown_scores.push(d.score);
            } else {
                known_scores.push(d.score);
            }
        }
        let rate = |row: usize| {
            let total: u64 = confusion[row].iter().sum();
            (total > 0).then(|| confusion[row][row] as f64 / total as f64)
        };
        let per_class_accuracy: Vec<Option<f64>> = (0..k).map(rate).collect();
        let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        let trace: u64 = (0..=k).map(|i| confusion[i][i]).sum();
        Ok(EvaluationReport {
            rule,
            class_ids: class_ids.to_vec(),
            mean_known_accuracy: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
            per_class_accuracy,
            ufc: rate(k),
            overall_accuracy: if truth.is_empty() { 0.0 } else { trace as f64 / truth.len() as f64 },
            histogram: ScoreHistogram::build(&known_scores, &unknown_scores, HISTOGRAM_BINS),
            confusion,
            windows: truth.len(),
            metadata,
        })
    }

    /// Confusion matrix CSV with state ids as headers and `UNKNOWN` last.
    pub fn confusion_csv(&self) -> String {
        confusion_csv(&self.class_ids, &self.confusion)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Write the report JSON, confusion CSV and histogram CSV into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save(dir.join(format!("{stem}.json")))?;
        write(&dir.join(format!("{stem}_confusion.csv")), &self.confusion_csv())?;
        write(&dir.join(format!("{stem}_histogram.csv")), &self.histogram.to_csv())
    }
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn confusion_csv(class_ids: &[i64], confusion: &[Vec<u64>]) -> String {
    let labels: Vec<String> = class_ids.iter().map(i64::to_string).chain(["UNKNOWN".to_string()]).collect();
    let mut out = format!("truth,{}\n", labels.join(","));
    for (label, row) in labels.iter().zip(confusion) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        writeln!(out, "{label},{}", cells.join(",")).unwrap();
    }
    out
}

/// Stable hash of a probability matrix, bit for bit.
pub fn probability_hash(probs: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in probs.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

/// Decide every row of `probs` under `rule`.
pub fn decide_all(rule: RuleKind, probs: &Tensor, thresholds: Option<&DecisionThresholds>) -> Result<Vec<Decision>> {
    (0..probs.shape()[0]).map(|i| decide_with(rule, probs.row(i), thresholds)).collect()
}

/// Evaluate `model` on labelled, already-normalised test windows. Passing
/// the probabilities lets several rules share one forward pass.
pub fn evaluate_probs(
    model: &Model,
    probs: &Tensor,
    windows: &WindowSet,
    rule: RuleKind,
    thresholds: Option<&DecisionThresholds>,
) -> Result<EvaluationReport> {
    let classes = model
        .classes
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no class map; train it first".into()))?;
    if rule.needs_thresholds() {
        let t = thresholds.ok_or_else(|| Error::Invalid("the collective rule needs calibrated thresholds".into()))?;
        if t.class_ids != classes.ids() {
            return Err(Error::SpecMismatch(format!(
                "thresholds cover states {:?}, model knows {:?}",
                t.class_ids,
                classes.ids()
            )));
        }
    }
    let truth = windows
        .states()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.map(|s| truth_index(s, classes))
                .ok_or_else(|| Error::Invalid(format!("test window {i} has no state label")))
        })
        .collect::<Result<Vec<_>>>()?;
    let decisions = decide_all(rule, probs, thresholds)?;
    let metadata = ReportMetadata {
        model: model.spec().name(),
        model_fingerprint: model.fingerprint(),
        thresholds_fingerprint: thresholds.filter(|_| rule.needs_thresholds()).map(|t| t.fingerprint.clone()),
        probability_hash: probability_hash(probs),
        seed: Some(model.metadata.seed),
    };
    EvaluationReport::tally(rule, classes.ids(), &truth, &decisions, metadata)
}

/// Forward pass plus [`evaluate_probs`].
pub fn evaluate(
    model: &Model,
    windows: &WindowSet,
    rule: RuleKind,
    thresholds: Option<&DecisionThresholds>,
    batch_size: usize,
) -> Result<EvaluationReport> {
    check_windows("evaluate", model, windows)?;
    let probs = model.predict_proba(windows, batch_size)?;
    evaluate_probs(model, &probs, windows, rule, thresholds)
}

/// Window `runs` at the model's window length and standardise them with the
/// statistics stored in the model.
pub fn model_windows(model: &Model, runs: &[RawRun], stride: usize) -> Result<WindowSet> {
    let mut windows = WindowSet::from_runs(runs, model.spec().window, stride)?;
    check_windows("model_windows", model, &windows)?;
    if let Some(stats) = &model.normalization {
        stats.apply(&mut windows)?;
    }
    Ok(windows)
}

/// Collective scores for every row, for inspection and plotting.
pub fn score_matrix(probs: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..probs.shape()[0]).map(|i| collective_scores(probs.row(i))).collect()
}

pub(crate) fn check_windows(op: &'static str, model: &Model, windows: &WindowSet) -> Result<()> {
    let spec = model.spec();
    for (axis, expected, found) in [("variables", spec.variables, windows.cols()), ("window", spec.window, windows.rows())] {
        if expected != found {
            return Err(Error::Dimension {
                op,
                axis,
                expected,
                found,
            });
        }
    }
    Ok(())
}
