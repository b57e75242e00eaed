//! Full multi-repetition experiment from a TOML config, as the
//! `experiment` subcommand runs it.
//!
//! cargo run --release --example experiment [-- path/to/config.toml]

use std::path::PathBuf;

use openset::eval::{run_experiment_observed, ExperimentConfig, Progress};

fn main() -> openset::Result<()> {
    let path = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/small_synthetic.toml"));
    let mut config = ExperimentConfig::load(&path)?.with_env_overrides();
    config.output_dir = std::env::temp_dir().join("openset-experiment-example");

    let result = run_experiment_observed(&config, &|p| {
        if let Progress::RepetitionDone { repetition, seconds } = p {
            eprintln!("repetition {repetition} finished in {seconds:.1}s");
        }
    })?;
    print!("{}", result.summary());
    result.export(&config.output_dir)?;
    println!("artifacts in {}", config.output_dir.display());
    Ok(())
}
