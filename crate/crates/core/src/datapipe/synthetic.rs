//! Seeded open-set benchmark: every class is baseline noise plus a signature
//! (a level shift and a sinusoid) on its own subset of variables. Unknown
//! classes get signatures that appear only at test time.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{RawRun, StateLabel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub known_classes: usize,
    pub unknown_classes: usize,
    pub variables: usize,
    pub run_length: usize,
    pub train_runs_per_class: usize,
    pub test_runs_per_class: usize,
    /// Standard deviation of the baseline noise, in signature units.
    pub noise_scale: f64,
    /// Level shift of a signature variable, in noise units.
    pub shift_magnitude: f64,
    pub oscillation_amplitude: f64,
    /// Number of variables each class signature touches. Subsets are
    /// disjoint, so `(K + U) * signature_width <= variables`.
    pub signature_width: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            known_classes: 4,
            unknown_classes: 2,
            variables: 8,
            run_length: 120,
            train_runs_per_class: 20,
            test_runs_per_class: 5,
            noise_scale: 1.0,
            shift_magnitude: 2.0,
            oscillation_amplitude: 2.0,
            signature_width: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.known_classes < 2 {
            return bad(format!("need at least 2 known classes, got {}", self.known_classes));
        }
        if self.unknown_classes < 1 {
            return bad("need at least 1 unknown class".into());
        }
        if self.signature_width == 0 || self.signature_width > self.variables {
            return bad(format!(
                "signature width {} must lie in 1..={}",
                self.signature_width, self.variables
            ));
        }
        let classes = self.known_classes + self.unknown_classes;
        if classes * self.signature_width > self.variables {
            return bad(format!(
                "{} variables cannot host {classes} disjoint {}-variable signatures",
                self.variables, self.signature_width
            ));
        }
        if self.run_length < 2 || self.train_runs_per_class == 0 || self.test_runs_per_class == 0 {
            return bad("run length must be >= 2 and run counts positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.shift_magnitude.is_finite() && self.oscillation_amplitude.is_finite()) {
            return bad("noise scale must be non-negative and magnitudes finite".into());
        }
        Ok(())
    }

    pub fn variable_names(&self) -> Vec<String> {
        (1..=self.variables).map(|j| format!("x{j}")).collect()
    }

    /// State id of class `c` (0-based): known classes are `1..=K`, unknown
    /// classes continue at `K+1`.
    pub fn state_of(&self, class: usize) -> StateLabel {
        StateLabel::Id(class as i64 + 1)
    }
}

/// Deterministic description of one class's deviation from baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub state: StateLabel,
    pub known: bool,
    /// Sorted variable indices the signature acts on.
    pub variables: Vec<usize>,
    /// Per-variable level shift (zero off the signature subset).
    pub shift: Vec<f64>,
    /// Oscillation period in time steps.
    pub period: f64,
    pub amplitude: f64,
    /// Per-variable oscillation phase.
    pub phase: Vec<f64>,
}

impl ClassSignature {
    /// Signature value of variable `j` at step `t` of a run.
    pub fn value(&self, j: usize, t: usize) -> f64 {
        if !self.variables.contains(&j) {
            return 0.0;
        }
        self.shift[j] + self.amplitude * (TAU * t as f64 / self.period + self.phase[j]).sin()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub signatures: Vec<ClassSignature>,
    /// Shared per-variable offset and scale applied to every class.
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
    /// Known classes only.
    pub train: Vec<RawRun>,
    /// Known classes followed by unknown classes.
    pub test: Vec<RawRun>,
}

const PERIOD_BASE: f64 = 5.0;
const PERIOD_GROWTH: f64 = 1.4;

fn signatures(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<ClassSignature> {
    let classes = spec.known_classes + spec.unknown_classes;
    let periods: Vec<f64> = (0..classes).map(|i| PERIOD_BASE * PERIOD_GROWTH.powi(i as i32)).collect();
    // Known signatures fill the first variables and unknown ones the last;
    // spare variables in between carry noise only.
    let w = spec.signature_width;
    let mut all: Vec<usize> = (0..spec.known_classes * w).collect();
    all.extend(spec.variables - spec.unknown_classes * w..spec.variables);
    let subsets: Vec<Vec<usize>> = all
        .chunks(spec.signature_width)
        .take(classes)
        .map(<[usize]>::to_vec)
        .collect();
    subsets
        .into_iter()
        .zip(periods)
        .enumerate()
        .map(|(c, (variables, period))| {
            let mut shift = vec![0.0; spec.variables];
            let mut phase = vec![0.0; spec.variables];
            for &j in &variables {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                shift[j] = sign * spec.shift_magnitude;
                phase[j] = rng.random_range(0.0..TAU);
            }
            ClassSignature {
                state: spec.state_of(c),
                known: c < spec.known_classes,
                variables,
                shift,
                period,
                amplitude: spec.oscillation_amplitude,
                phase,
            }
        })
        .collect()
}

fn run(
    spec: &SyntheticSpec,
    sig: &ClassSignature,
    offsets: &[f64],
    scales: &[f64],
    run_id: String,
    stream: u64,
) -> RawRun {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let (n, m) = (spec.run_length, spec.variables);
    let mut samples = Vec::with_capacity(n * m);
    for t in 0..n {
        for j in 0..m {
            let noise: f64 = rng.sample(StandardNormal);
            let signal = spec.noise_scale * noise + sig.value(j, t);
            samples.push(offsets[j] + scales[j] * signal);
        }
    }
    RawRun::new(run_id, sig.state, m, samples).expect("generated run is well formed")
}

/// Generate the training runs (known classes) and test runs (known and
/// unknown classes) described by `spec`. Identical specs give bit-identical
/// datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigs = signatures(spec, &mut rng);
    let offsets: Vec<f64> = (0..spec.variables).map(|_| rng.random_range(-50.0..50.0)).collect();
    let scales: Vec<f64> = (0..spec.variables).map(|_| rng.random_range(0.2..5.0)).collect();

    // Stream ids keep every run independent of the run counts requested.
    let stream = |split: u64, class: usize, r: usize| 1 + (split << 62) + ((class as u64) << 32) + r as u64;
    let mut train = Vec::new();
    for (c, sig) in sigs.iter().enumerate().filter(|(_, s)| s.known) {
        for r in 0..spec.train_runs_per_class {
            train.push(run(spec, sig, &offsets, &scales, format!("train-c{}-r{r}", c + 1), stream(0, c, r)));
        }
    }
    let mut test = Vec::new();
    for (c, sig) in sigs.iter().enumerate() {
        for r in 0..spec.test_runs_per_class {
            test.push(run(spec, sig, &offsets, &scales, format!("test-c{}-r{r}", c + 1), stream(1, c, r)));
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        signatures: sigs,
        offsets,
        scales,
        train,
        test,
    })
}
