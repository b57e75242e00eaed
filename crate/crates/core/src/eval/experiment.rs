use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{confusion_csv, evaluate_probs, write, EvaluationReport};
use crate::datapipe::{ClassMap, NormalizationStats, RawRun, WindowSet};
use crate::decision::{calibrate_from_probs, DecisionThresholds};
use crate::error::{Error, Result};
use crate::modelzoo::Model;
use crate::training::{train_observed, EpochRecord, TrainLog};

/// Normalised train and test windows shared by every repetition.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub classes: ClassMap,
    pub stats: NormalizationStats,
    pub train: WindowSet,
    pub test: WindowSet,
}

impl PreparedData {
    /// Window both splits and standardise them with statistics fitted on the
    /// training windows only.
    pub fn from_runs(train_runs: &[RawRun], test_runs: &[RawRun], window: usize, stride: usize) -> Result<Self> {
        let classes = ClassMap::from_runs(train_runs)?;
        let mut train = WindowSet::from_runs(train_runs, window, stride)?;
        let mut test = WindowSet::from_runs(test_runs, window, stride)?;
        let stats = NormalizationStats::fit(&train)?;
        stats.apply(&mut train)?;
        stats.apply(&mut test)?;
        Ok(PreparedData {
            classes,
            stats,
            train,
            test,
        })
    }

    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let (train, test) = config.load_runs()?;
        Self::from_runs(&train, &test, config.window, config.stride)
    }
}

/// Outcome of one train, calibrate and evaluate cycle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub index: usize,
    pub seed: u64,
    pub log: TrainLog,
    pub thresholds: Option<DecisionThresholds>,
    /// One report per rule, primary rule first.
    pub reports: Vec<EvaluationReport>,
}

/// Metrics averaged over repetitions for one rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedReport {
    pub rule: crate::decision::RuleKind,
    pub model: String,
    pub runs: usize,
    pub class_ids: Vec<i64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub ufc: Option<f64>,
    pub mean_known_accuracy: Option<f64>,
    pub overall_accuracy: f64,
    /// Sample standard deviation across runs (0 for a single run).
    pub overall_accuracy_std: f64,
    /// Confusion matrices summed over runs.
    pub confusion_sum: Vec<Vec<u64>>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AveragedReport {
    pub fn from_reports(reports: &[&EvaluationReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Invalid("nothing to average".into()))?;
        if reports.iter().any(|r| r.rule != first.rule || r.class_ids != first.class_ids) {
            return Err(Error::Invalid("cannot average reports of different rules or class sets".into()));
        }
        let n = reports.len() as f64;
        let k = first.class_ids.len();
        let overall: Vec<f64> = reports.iter().map(|r| r.overall_accuracy).collect();
        let mean = overall.iter().sum::<f64>() / n;
        let std = if reports.len() > 1 {
            (overall.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut confusion_sum = vec![vec![0u64; k + 1]; k + 1];
        for r in reports {
            for (dst, src) in confusion_sum.iter_mut().zip(&r.confusion) {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        Ok(AveragedReport {
            rule: first.rule,
            model: first.metadata.model.clone(),
            runs: reports.len(),
            class_ids: first.class_ids.clone(),
            per_class_accuracy: (0..k).map(|c| mean_opt(reports.iter().map(|r| r.per_class_accuracy[c]))).collect(),
            ufc: mean_opt(reports.iter().map(|r| r.ufc)),
            mean_known_accuracy: mean_opt(reports.iter().map(|r| r.mean_known_accuracy)),
            overall_accuracy: mean,
            overall_accuracy_std: std,
            confusion_sum,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub class_ids: Vec<i64>,
    pub averaged: Vec<AveragedReport>,
    pub repetitions: Vec<RepetitionResult>,
    #[serde(skip)]
    pub models: Vec<Model>,
}

/// Progress notifications from a running experiment.
#[derive(Clone, Debug)]
pub enum Progress {
    Epoch { repetition: usize, record: EpochRecord },
    RepetitionDone { repetition: usize, seconds: f64 },
}

/// Train, calibrate and evaluate once with seed `config.seed + index`.
pub fn run_repetition(
    config: &ExperimentConfig,
    data: &PreparedData,
    index: usize,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, RepetitionResult)> {
    let seed = config.seed + index as u64;
    let spec = config.model_spec(data.classes.len(), data.train.cols());
    let mut model = Model::build(&spec, seed)?;
    model.normalization = Some(data.stats.clone());
    let log = train_observed(&mut model, &data.train, &data.classes, &config.train_config(seed), on_epoch)?;

    let rules = config.rules();
    let thresholds = if rules.iter().any(|r| r.needs_thresholds()) {
        let train_probs = model.predict_proba(&data.train, config.batch_size)?;
        Some(calibrate_from_probs(&model, &train_probs, &data.train, &data.classes, config.quantile)?)
    } else {
        None
    };
    let test_probs = model.predict_proba(&data.test, config.batch_size)?;
    let reports = rules
        .iter()
        .map(|&rule| evaluate_probs(&model, &test_probs, &data.test, rule, thresholds.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        model,
        RepetitionResult {
            index,
            seed,
            log,
            thresholds,
            reports,
        },
    ))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_observed(config, &|_| {})
}

/// Run every repetition (concurrently when `config.threads` allows) and
/// average the reports per rule.
pub fn run_experiment_observed(
    config: &ExperimentConfig,
    on_progress: &(dyn Fn(Progress) + Sync),
) -> Result<ExperimentResult> {
    config.validate()?;
    let data = PreparedData::load(config)?;
    let workers = match config.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(config.repetitions);

    let outcomes: Mutex<Vec<(usize, Result<(Model, RepetitionResult)>)>> = Mutex::new(Vec::new());
    let work = |worker: usize| {
        for index in (worker..config.repetitions).step_by(workers) {
            let started = Instant::now();
            let out = run_repetition(config, &data, index, |record| {
                on_progress(Progress::Epoch {
                    repetition: index,
                    record: record.clone(),
                })
            });
            let failed = out.is_err();
            on_progress(Progress::RepetitionDone {
                repetition: index,
                seconds: started.elapsed().as_secs_f64(),
            });
            outcomes.lock().expect("no worker panicked").push((index, out));
            if failed {
                break;
            }
        }
    };
    if workers <= 1 {
        work(0);
    } else {
        std::thread::scope(|s| {
            for w in 0..workers {
                let work = &work;
                s.spawn(move || work(w));
            }
        });
    }
    let mut outcomes = outcomes.into_inner().expect("no worker panicked");
    outcomes.sort_by_key(|(i, _)| *i);

    let mut models = Vec::new();
    let mut repetitions = Vec::new();
    for (index, out) in outcomes {
        match out {
            Ok((model, rep)) => {
                models.push(model);
                repetitions.push(rep);
            }
            Err(source) => {
                return Err(Error::Experiment {
                    repetition: index,
                    completed: repetitions.len(),
                    partial: serde_json::to_string(&repetitions).ok(),
                    source: Box::new(source),
                })
            }
        }
    }
    let averaged = (0..config.rules().len())
        .map(|r| AveragedReport::from_reports(&repetitions.iter().map(|rep| &rep.reports[r]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: config.clone(),
        class_ids: data.classes.ids().to_vec(),
        averaged,
        repetitions,
        models,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl ExperimentResult {
    pub fn averaged_for(&self, rule: crate::decision::RuleKind) -> Option<&AveragedReport> {
        self.averaged.iter().find(|a| a.rule == rule)
    }

    /// Plain-text table of the averaged metrics.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for a in &self.averaged {
            writeln!(out, "{} / {} ({} runs)", a.model, a.rule.name(), a.runs).unwrap();
            for (id, acc) in a.class_ids.iter().zip(&a.per_class_accuracy) {
                writeln!(out, "  state {id:<8} {}", fmt_opt(*acc)).unwrap();
            }
            writeln!(out, "  UFC            {}", fmt_opt(a.ufc)).unwrap();
            writeln!(out, "  mean known     {}", fmt_opt(a.mean_known_accuracy)).unwrap();
            writeln!(out, "  overall        {:.4} ± {:.4}", a.overall_accuracy, a.overall_accuracy_std).unwrap();
        }
        out
    }

    /// Write the effective config, summary, full JSON and per-repetition
    /// artifacts into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("effective_config.toml"), &self.config.to_toml()?)?;
        write(&dir.join("summary.txt"), &self.summary())?;
        write(&dir.join("experiment.json"), &serde_json::to_string_pretty(self)?)?;
        for a in &self.averaged {
            write(
                &dir.join(format!("{}_confusion_sum.csv", a.rule.name())),
                &confusion_csv(&a.class_ids, &a.confusion_sum),
            )?;
        }
        for (i, rep) in self.repetitions.iter().enumerate() {
            let sub = dir.join(format!("rep{:02}", rep.index));
            for report in &rep.reports {
                report.export(&sub, report.rule.name())?;
            }
            rep.log.save_jsonl(sub.join("train_log.jsonl"))?;
            if let Some(t) = &rep.thresholds {
                t.save(sub.join("thresholds.json"))?;
                write(&sub.join("thresholds.tsv"), &t.to_table())?;
            }
            if let Some(model) = self.models.get(i) {
                model.save(sub.join("model.json"))?;
            }
        }
        Ok(())
    }
}
