//! Command-line front end. `main` only forwards `std::env::args` here.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datapipe::{
    generate_synthetic, load_runs_csv, window, write_runs_csv, ClassMap, CsvSchema, NormalizationStats, WindowSet,
};
use crate::decision::{calibrate, decide_with, DecisionThresholds, RuleKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, model_windows, run_experiment_observed, ExperimentConfig, Progress};
use crate::modelzoo::Model;
use crate::training::train_observed;

const MODEL_FILE: &str = "model.json";
const THRESHOLDS_FILE: &str = "thresholds.json";

#[derive(Debug, Parser)]
#[command(name = "openset", version, about = "Open-set health-state recognition from process time series")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic open-set dataset as train.csv and test.csv.
    GenSynth(Common),
    /// Fit a model on the training split and save it with its statistics.
    Train(Common),
    /// Compute per-class thresholds from the training split.
    Calibrate(WithModel),
    /// Score the test split and write a report.
    Evaluate(Evaluate),
    /// Decide every window of a CSV of raw runs.
    Predict(Predict),
    /// Repeat train, calibrate and evaluate and average the reports.
    Experiment(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the training seed (the data seed for gen-synth).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats OPENSET_OUTPUT_DIR and the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Model file; defaults to <out>/model.json.
    #[arg(short, long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Evaluate {
    #[command(flatten)]
    inner: WithModel,
    /// Thresholds file; defaults to <out>/thresholds.json.
    #[arg(short, long)]
    thresholds: Option<PathBuf>,
    /// Decision rule; defaults to the config's rule.
    #[arg(short, long)]
    rule: Option<RuleKind>,
}

#[derive(Debug, Args)]
struct Predict {
    /// CSV of runs; the state column may be absent.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    model: PathBuf,
    /// Thresholds file; defaults to thresholds.json next to the model.
    #[arg(short, long)]
    thresholds: Option<PathBuf>,
    #[arg(short, long, default_value = "collective")]
    rule: RuleKind,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = "run_id")]
    run_id_column: String,
    #[arg(long, default_value = "state")]
    state_column: String,
    /// Non-variable columns to skip; repeatable.
    #[arg(long = "ignore-column")]
    ignore_columns: Vec<String>,
    /// Decisions CSV; stdout when omitted.
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        }
        .with_env_overrides();
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: PathBuf, hint: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, hint })
    }
}

fn load_model(path: Option<&PathBuf>, config: &ExperimentConfig) -> Result<(PathBuf, Model)> {
    let path = require(
        path.cloned().unwrap_or_else(|| config.output_dir.join(MODEL_FILE)),
        "run `openset train` first",
    )?;
    let model = Model::load(&path)?;
    Ok((path, model))
}

fn load_thresholds(path: PathBuf) -> Result<DecisionThresholds> {
    DecisionThresholds::load(require(path, "run `openset calibrate` first")?)
}

/// Parse `args` and run the chosen subcommand. Human-readable progress goes to
/// stderr; results go to files and stdout.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match cli.command {
        Command::GenSynth(c) => gen_synth(&c),
        Command::Train(c) => train_cmd(&c),
        Command::Calibrate(c) => calibrate_cmd(&c),
        Command::Evaluate(c) => evaluate_cmd(&c),
        Command::Predict(c) => predict_cmd(&c),
        Command::Experiment(c) => experiment_cmd(&c),
    }
}

fn gen_synth(c: &Common) -> Result<()> {
    let mut config = c.config()?;
    if let Some(seed) = c.seed {
        config.data_seed = seed;
    }
    let spec = config.synthetic_spec();
    let data = generate_synthetic(&spec)?;
    create_dir(&config.output_dir)?;
    let names = spec.variable_names();
    for (name, runs) in [("train.csv", &data.train), ("test.csv", &data.test)] {
        let path = config.output_dir.join(name);
        write_runs_csv(&path, runs, &names)?;
        eprintln!("wrote {} ({} runs)", path.display(), runs.len());
    }
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let config = c.config()?;
    let (train_runs, _) = config.load_runs()?;
    let classes = ClassMap::from_runs(&train_runs)?;
    let mut windows = WindowSet::from_runs(&train_runs, config.window, config.stride)?;
    let stats = NormalizationStats::fit(&windows)?;
    stats.apply(&mut windows)?;
    let spec = config.model_spec(classes.len(), windows.cols());
    let mut model = Model::build(&spec, config.seed)?;
    model.normalization = Some(stats);
    let log = train_observed(&mut model, &windows, &classes, &config.train_config(config.seed), |r| {
        eprintln!("epoch {:>3}  loss {:.6}  accuracy {:.4}", r.epoch, r.mean_loss, r.accuracy)
    })?;
    create_dir(&config.output_dir)?;
    let path = config.output_dir.join(MODEL_FILE);
    model.save(&path)?;
    log.save_jsonl(config.output_dir.join("train_log.jsonl"))?;
    eprintln!("stopped ({}) after {} epochs; wrote {}", log.stop_reason, log.epochs.len(), path.display());
    Ok(())
}

fn calibrate_cmd(c: &WithModel) -> Result<()> {
    let config = c.common.config()?;
    let (_, model) = load_model(c.model.as_ref(), &config)?;
    let (train_runs, _) = config.load_runs()?;
    let windows = model_windows(&model, &train_runs, config.stride)?;
    let thresholds = calibrate(&model, &windows, config.quantile, config.batch_size)?;
    create_dir(&config.output_dir)?;
    let path = config.output_dir.join(THRESHOLDS_FILE);
    thresholds.save(&path)?;
    std::fs::write(config.output_dir.join("thresholds.tsv"), thresholds.to_table())
        .map_err(|e| Error::io(config.output_dir.join("thresholds.tsv"), e))?;
    print!("{}", thresholds.to_table());
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn evaluate_cmd(c: &Evaluate) -> Result<()> {
    let config = c.inner.common.config()?;
    let (_, model) = load_model(c.inner.model.as_ref(), &config)?;
    let rule = c.rule.unwrap_or(config.rule);
    let thresholds = if rule.needs_thresholds() {
        let path = c.thresholds.clone().unwrap_or_else(|| config.output_dir.join(THRESHOLDS_FILE));
        Some(load_thresholds(path)?)
    } else {
        None
    };
    let (_, test_runs) = config.load_runs()?;
    let windows = model_windows(&model, &test_runs, config.stride)?;
    let report = evaluate(&model, &windows, rule, thresholds.as_ref(), config.batch_size)?;
    let stem = format!("evaluate_{}", rule.name());
    report.export(&config.output_dir, &stem)?;
    println!("{} / {}", report.metadata.model, rule.name());
    for (id, acc) in report.class_ids.iter().zip(&report.per_class_accuracy) {
        println!("  state {id:<8} {}", acc.map_or("-".into(), |a| format!("{a:.4}")));
    }
    println!("  UFC            {}", report.ufc.map_or("-".into(), |a| format!("{a:.4}")));
    println!("  overall        {:.4}", report.overall_accuracy);
    eprintln!("wrote {}", config.output_dir.join(format!("{stem}.json")).display());
    Ok(())
}

fn predict_cmd(c: &Predict) -> Result<()> {
    let model = Model::load(require(c.model.clone(), "run `openset train` first")?)?;
    let classes = model
        .classes
        .clone()
        .ok_or_else(|| Error::Invalid("model has no class map; train it first".into()))?;
    let thresholds = if c.rule.needs_thresholds() {
        let path = c.thresholds.clone().unwrap_or_else(|| {
            c.model
                .parent()
                .unwrap_or(Path::new("."))
                .join(THRESHOLDS_FILE)
        });
        Some(load_thresholds(path)?)
    } else {
        None
    };
    let schema = CsvSchema {
        run_id_column: c.run_id_column.clone(),
        state_column: c.state_column.clone(),
        ignore_columns: c.ignore_columns.clone(),
        expected_variables: Some(model.spec().variables),
        state_optional: true,
    };
    let runs = load_runs_csv(&c.input, &schema)?;
    // Every run is scored before anything is written, so a bad run leaves no
    // partial output behind.
    let mut rows = Vec::new();
    for run in &runs {
        let samples = window(run, model.spec().window, c.stride)?;
        let mut windows = WindowSet::from_samples(&samples)?;
        if let Some(stats) = &model.normalization {
            stats.apply(&mut windows)?;
        }
        let probs = model.predict_proba(&windows, 256)?;
        for i in 0..windows.len() {
            let d = decide_with(c.rule, probs.row(i), thresholds.as_ref())?;
            let predicted = d.predicted().map_or_else(|| "UNKNOWN".to_string(), |k| classes.label_of(k).to_string());
            rows.push([
                run.run_id.clone(),
                (i * c.stride).to_string(),
                run.state.to_string(),
                predicted,
                d.score.to_string(),
                d.accepted.to_string(),
            ]);
        }
    }
    let mut out = csv::Writer::from_writer(match &c.output {
        Some(path) => Box::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?) as Box<dyn Write>,
        None => Box::new(std::io::stdout().lock()),
    });
    let shown = c.output.clone().unwrap_or_else(|| "<stdout>".into());
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&shown, io),
        other => Error::Invalid(format!("{other:?}")),
    };
    out.write_record(["run_id", "start", "state", "predicted", "score", "accepted"])
        .map_err(io_err)?;
    for row in rows {
        out.write_record(row).map_err(io_err)?;
    }
    out.flush().map_err(|e| Error::io(&shown, e))?;
    Ok(())
}

fn experiment_cmd(c: &Common) -> Result<()> {
    let config = c.config()?;
    let result = run_experiment_observed(&config, &|p| match p {
        Progress::Epoch { repetition, record } => eprintln!(
            "rep {repetition:>2} epoch {:>3}  loss {:.6}  accuracy {:.4}",
            record.epoch, record.mean_loss, record.accuracy
        ),
        Progress::RepetitionDone { repetition, seconds } => eprintln!("rep {repetition:>2} done in {seconds:.1}s"),
    })?;
    result.export(&config.output_dir)?;
    print!("{}", result.summary());
    eprintln!("wrote {}", config.output_dir.display());
    Ok(())
}
