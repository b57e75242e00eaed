//! Train a multi-scale residual network with one-vs-rest heads on
//! synthetic runs and print the epoch log.
//!
//! cargo run --release --example training

use openset::datapipe::{generate_synthetic, SyntheticSpec};
use openset::eval::PreparedData;
use openset::modelzoo::{ExtractorKind, HeadKind, Model, ModelSpec};
use openset::training::{train_observed, TrainConfig};

fn main() -> openset::Result<()> {
    let spec = SyntheticSpec {
        known_classes: 3,
        unknown_classes: 1,
        variables: 6,
        run_length: 60,
        train_runs_per_class: 8,
        test_runs_per_class: 2,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let runs = generate_synthetic(&spec)?;
    let data = PreparedData::from_runs(&runs.train, &runs.test, 20, 2)?;

    let mut mspec = ModelSpec::new(ExtractorKind::MultiscaleResidual, HeadKind::Ovrn, data.classes.len(), 20, 6);
    mspec.channels = vec![4, 8];
    let mut model = Model::build(&mspec, 1)?;
    model.normalization = Some(data.stats.clone());

    let config = TrainConfig {
        max_epochs: 15,
        ..TrainConfig::default()
    };
    let log = train_observed(&mut model, &data.train, &data.classes, &config, |r| {
        println!("epoch {:>2}  loss {:.5}  accuracy {:.3}", r.epoch, r.mean_loss, r.accuracy)
    })?;
    println!("stopped: {} after {:.1}s", log.stop_reason, log.wall_seconds);
    Ok(())
}
