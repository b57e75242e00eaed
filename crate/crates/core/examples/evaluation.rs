//! One train/calibrate/evaluate cycle on synthetic data, the open-set
//! metrics it yields, and the exported report files.
//!
//! cargo run --release --example evaluation

use openset::decision::RuleKind;
use openset::eval::{run_repetition, ExperimentConfig, PreparedData};

fn main() -> openset::Result<()> {
    let config = ExperimentConfig {
        known_classes: 3,
        unknown_classes: 1,
        variables: 6,
        run_length: 60,
        train_runs_per_class: 8,
        test_runs_per_class: 3,
        data_seed: 7,
        stride: 2,
        channels: vec![4, 8],
        max_epochs: 8,
        compare_rules: vec![RuleKind::OvrnMaxBaseline],
        ..ExperimentConfig::default()
    };
    let data = PreparedData::load(&config)?;
    let (_model, rep) = run_repetition(&config, &data, 0, |_| {})?;

    for report in &rep.reports {
        println!("{} / {}", report.metadata.model, report.rule.name());
        for (id, acc) in report.class_ids.iter().zip(&report.per_class_accuracy) {
            println!("  state {id}: {:.3}", acc.unwrap_or(f64::NAN));
        }
        println!("  UFC {:.3}  overall {:.3}", report.ufc.unwrap_or(f64::NAN), report.overall_accuracy);
        print!("{}", report.confusion_csv());
    }

    let dir = std::env::temp_dir().join("openset-evaluation-example");
    for report in &rep.reports {
        report.export(&dir, report.rule.name())?;
    }
    println!("reports, confusion and histogram CSVs in {}", dir.display());
    Ok(())
}
