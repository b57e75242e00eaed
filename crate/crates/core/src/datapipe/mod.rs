//! Raw runs, sliding-window matrixing, training-set normalisation, CSV
//! ingestion and the synthetic open-set benchmark generator.

mod csvio;
mod normalize;
mod synthetic;
mod window;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csvio::{load_runs_csv, write_runs_csv, CsvSchema};
pub use normalize::NormalizationStats;
pub use synthetic::{generate_synthetic, ClassSignature, SyntheticDataset, SyntheticSpec};
pub use window::{window, WindowSet, WindowedSample};

/// Health-state label as it appears in the data: an integer id or the
/// distinguished unknown marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateLabel {
    Id(i64),
    Unknown,
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateLabel::Id(id) => write!(f, "{id}"),
            StateLabel::Unknown => f.write_str("UNKNOWN"),
        }
    }
}

impl std::str::FromStr for StateLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("unknown") {
            return Ok(StateLabel::Unknown);
        }
        if let Ok(id) = s.parse::<i64>() {
            return Ok(StateLabel::Id(id));
        }
        match s.parse::<f64>() {
            Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(StateLabel::Id(v as i64)),
            _ => Err(format!("`{s}` is neither an integer state id nor UNKNOWN")),
        }
    }
}

/// One simulation or recording run: `len` time steps of `variables` values,
/// stored row-major (time-major).
#[derive(Clone, Debug, PartialEq)]
pub struct RawRun {
    pub run_id: String,
    pub state: StateLabel,
    len: usize,
    variables: usize,
    samples: Vec<f64>,
}

impl RawRun {
    pub fn new(run_id: impl Into<String>, state: StateLabel, variables: usize, samples: Vec<f64>) -> Result<Self> {
        let run_id = run_id.into();
        if variables == 0 || samples.is_empty() || samples.len() % variables != 0 {
            return Err(Error::Invalid(format!(
                "run `{run_id}`: {} values cannot form rows of {variables} variables",
                samples.len()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "run `{run_id}`: non-finite value at step {}, variable {}",
                pos / variables,
                pos % variables
            )));
        }
        Ok(RawRun {
            run_id,
            state,
            len: samples.len() / variables,
            variables,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn variables(&self) -> usize {
        self.variables
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.samples[t * self.variables..(t + 1) * self.variables]
    }
}

/// Mapping between external state ids and the 0-based class indices the
/// models use. Ids outside the map are unknown states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    ids: Vec<i64>,
}

impl ClassMap {
    /// Known classes are the distinct ids present in `runs`, in ascending order.
    pub fn from_runs(runs: &[RawRun]) -> Result<Self> {
        let mut ids = Vec::new();
        for run in runs {
            match run.state {
                StateLabel::Id(id) => ids.push(id),
                StateLabel::Unknown => {
                    return Err(Error::Invalid(format!(
                        "training run `{}` is labelled UNKNOWN; unknown states never enter training",
                        run.run_id
                    )))
                }
            }
        }
        ids.sort_unstable();
        ids.dedup();
        Self::new(ids)
    }

    pub fn new(ids: Vec<i64>) -> Result<Self> {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::Invalid(format!("duplicate class ids in {ids:?}")));
        }
        if ids.len() < 2 {
            return Err(Error::Invalid(format!("need at least 2 known classes, found {}", ids.len())));
        }
        Ok(ClassMap { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    /// Class index of a label, `None` for unknown states.
    pub fn index_of(&self, label: StateLabel) -> Option<usize> {
        match label {
            StateLabel::Id(id) => self.ids.iter().position(|&x| x == id),
            StateLabel::Unknown => None,
        }
    }

    pub fn label_of(&self, class: usize) -> StateLabel {
        StateLabel::Id(self.ids[class])
    }
}
