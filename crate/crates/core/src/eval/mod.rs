//! Open-set evaluation, multi-run experiments and report export.

mod config;
mod experiment;
mod report;

pub use config::{DataSource, ExperimentConfig, OUTPUT_DIR_ENV};
pub use experiment::{
    run_experiment, run_experiment_observed, run_repetition, AveragedReport, ExperimentResult, PreparedData, Progress,
    RepetitionResult,
};
pub use report::{
    decide_all, evaluate, evaluate_probs, model_windows, probability_hash, score_matrix, truth_index, EvaluationReport,
    ReportMetadata, ScoreHistogram, HISTOGRAM_BINS,
};
