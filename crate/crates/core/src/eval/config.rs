use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{generate_synthetic, load_runs_csv, CsvSchema, RawRun, SyntheticSpec};
use crate::decision::{RuleKind, DEFAULT_QUANTILE};
use crate::error::{Error, Result};
use crate::modelzoo::{ExtractorKind, HeadKind, ModelSpec};
use crate::training::{LossKind, TrainConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "OPENSET_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Flat experiment description, read from TOML. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub source: DataSource,

    // CSV source
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub run_id_column: String,
    pub state_column: String,
    pub ignore_columns: Vec<String>,
    pub expected_variables: Option<usize>,

    // Synthetic source
    pub known_classes: usize,
    pub unknown_classes: usize,
    pub variables: usize,
    pub run_length: usize,
    pub train_runs_per_class: usize,
    pub test_runs_per_class: usize,
    pub noise_scale: f64,
    pub shift_magnitude: f64,
    pub oscillation_amplitude: f64,
    pub signature_width: usize,
    /// Seed of the generated dataset; fixed across repetitions.
    pub data_seed: u64,

    pub window: usize,
    pub stride: usize,

    pub extractor: ExtractorKind,
    pub head: HeadKind,
    /// Empty picks the extractor's default kernel set.
    pub kernel_sizes: Vec<usize>,
    pub channels: Vec<usize>,
    pub depth: usize,
    pub ovrn_hidden: usize,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub convergence_tol: f64,
    pub patience: usize,
    pub loss_kind: Option<LossKind>,

    pub rule: RuleKind,
    /// Further rules evaluated on the same probabilities.
    pub compare_rules: Vec<RuleKind>,
    pub quantile: f64,

    pub repetitions: usize,
    /// Repetition `i` trains with seed `seed + i`.
    pub seed: u64,
    /// Worker threads for repetitions; 0 uses the available parallelism.
    pub threads: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let schema = CsvSchema::default();
        let train = TrainConfig::default();
        ExperimentConfig {
            name: "experiment".into(),
            source: DataSource::Synthetic,
            train_csv: None,
            test_csv: None,
            run_id_column: schema.run_id_column,
            state_column: schema.state_column,
            ignore_columns: schema.ignore_columns,
            expected_variables: None,
            known_classes: synth.known_classes,
            unknown_classes: synth.unknown_classes,
            variables: synth.variables,
            run_length: synth.run_length,
            train_runs_per_class: synth.train_runs_per_class,
            test_runs_per_class: synth.test_runs_per_class,
            noise_scale: synth.noise_scale,
            shift_magnitude: synth.shift_magnitude,
            oscillation_amplitude: synth.oscillation_amplitude,
            signature_width: synth.signature_width,
            data_seed: synth.seed,
            window: 20,
            stride: 1,
            extractor: ExtractorKind::MultiscaleResidual,
            head: HeadKind::Ovrn,
            kernel_sizes: Vec::new(),
            channels: vec![8, 16],
            depth: 1,
            ovrn_hidden: 32,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            max_epochs: train.max_epochs,
            convergence_tol: train.convergence_tol,
            patience: train.patience,
            loss_kind: None,
            rule: RuleKind::Collective,
            compare_rules: Vec::new(),
            quantile: DEFAULT_QUANTILE,
            repetitions: 1,
            seed: 0,
            threads: 1,
            output_dir: PathBuf::from("openset-output"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Read a config file. Relative CSV paths resolve against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.train_csv, &mut config.test_csv].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `OPENSET_OUTPUT_DIR` if set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config(format!("quantile must lie in (0, 1), got {}", self.quantile)));
        }
        if self.source == DataSource::Csv && (self.train_csv.is_none() || self.test_csv.is_none()) {
            return Err(Error::Config("a csv source needs train_csv and test_csv".into()));
        }
        if self.source == DataSource::Synthetic {
            self.synthetic_spec().validate()?;
        }
        self.train_config(self.seed).validate()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            known_classes: self.known_classes,
            unknown_classes: self.unknown_classes,
            variables: self.variables,
            run_length: self.run_length,
            train_runs_per_class: self.train_runs_per_class,
            test_runs_per_class: self.test_runs_per_class,
            noise_scale: self.noise_scale,
            shift_magnitude: self.shift_magnitude,
            oscillation_amplitude: self.oscillation_amplitude,
            signature_width: self.signature_width,
            seed: self.data_seed,
        }
    }

    pub fn csv_schema(&self) -> CsvSchema {
        CsvSchema {
            run_id_column: self.run_id_column.clone(),
            state_column: self.state_column.clone(),
            ignore_columns: self.ignore_columns.clone(),
            expected_variables: self.expected_variables,
            state_optional: false,
        }
    }

    /// Raw train and test runs from the configured source.
    pub fn load_runs(&self) -> Result<(Vec<RawRun>, Vec<RawRun>)> {
        match self.source {
            DataSource::Synthetic => {
                let d = generate_synthetic(&self.synthetic_spec())?;
                Ok((d.train, d.test))
            }
            DataSource::Csv => {
                let schema = self.csv_schema();
                let missing = || Error::Config("a csv source needs train_csv and test_csv".into());
                let train = load_runs_csv(self.train_csv.as_ref().ok_or_else(missing)?, &schema)?;
                let test = load_runs_csv(self.test_csv.as_ref().ok_or_else(missing)?, &schema)?;
                Ok((train, test))
            }
        }
    }

    pub fn model_spec(&self, classes: usize, variables: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.extractor, self.head, classes, self.window, variables);
        if !self.kernel_sizes.is_empty() {
            spec.kernel_sizes = self.kernel_sizes.clone();
        }
        spec.channels = self.channels.clone();
        spec.depth = self.depth;
        spec.ovrn_hidden = self.ovrn_hidden;
        spec
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            convergence_tol: self.convergence_tol,
            patience: self.patience,
            seed,
            loss_kind: self.loss_kind,
        }
    }

    /// Primary rule first, then the comparison rules without duplicates.
    pub fn rules(&self) -> Vec<RuleKind> {
        let mut rules = vec![self.rule];
        for &r in &self.compare_rules {
            if !rules.contains(&r) {
                rules.push(r);
            }
        }
        rules
    }
}
