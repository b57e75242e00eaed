//! Synthetic process runs, sliding windows, standardisation and the CSV
//! run format.
//!
//! cargo run --example windowing

use openset::datapipe::{
    generate_synthetic, load_runs_csv, write_runs_csv, ClassMap, CsvSchema, NormalizationStats, SyntheticSpec, WindowSet,
};

fn main() -> openset::Result<()> {
    let spec = SyntheticSpec {
        known_classes: 3,
        unknown_classes: 1,
        variables: 6,
        run_length: 80,
        train_runs_per_class: 4,
        test_runs_per_class: 2,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    for sig in &data.signatures {
        println!(
            "state {:>2} ({}) on variables {:?}, period {:.1}",
            sig.state,
            if sig.known { "known" } else { "unknown" },
            sig.variables,
            sig.period
        );
    }

    let classes = ClassMap::from_runs(&data.train)?;
    let mut train = WindowSet::from_runs(&data.train, 20, 1)?;
    let mut test = WindowSet::from_runs(&data.test, 20, 1)?;
    println!("known states {:?}", classes.ids());
    println!("{} training windows of {}x{}, {} test windows", train.len(), train.rows(), train.cols(), test.len());

    // Statistics come from the training windows only.
    let stats = NormalizationStats::fit(&train)?;
    stats.apply(&mut train)?;
    stats.apply(&mut test)?;
    println!("per-variable mean {:?}", stats.mean.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>());

    let dir = std::env::temp_dir().join("openset-windowing-example");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    let path = dir.join("train.csv");
    write_runs_csv(&path, &data.train, &spec.variable_names())?;
    let back = load_runs_csv(&path, &CsvSchema::default())?;
    println!("wrote and reread {} runs via {}", back.len(), path.display());
    Ok(())
}
