//! The four feature extractors with either classifier head: parameter
//! counts, output shapes and a save/load round trip.
//!
//! cargo run --example architectures

use openset::modelzoo::{ExtractorKind, HeadKind, Model, ModelSpec};
use openset::numcore::Tensor;
use openset::datapipe::WindowSet;

fn main() -> openset::Result<()> {
    let (classes, window, variables) = (4, 20, 8);
    let mut batch = WindowSet::empty(window, variables);
    for i in 0..5 {
        let data: Vec<f64> = (0..window * variables).map(|j| ((i * 31 + j) as f64 * 0.1).sin()).collect();
        batch.push(&data, None)?;
    }

    for extractor in ExtractorKind::ALL {
        for head in [HeadKind::Ovrn, HeadKind::Softmax] {
            let spec = ModelSpec::new(extractor, head, classes, window, variables);
            let model = Model::build(&spec, 0)?;
            let probs: Tensor = model.predict_proba(&batch, 64)?;
            let row: Vec<String> = probs.row(0).iter().map(|p| format!("{p:.3}")).collect();
            println!(
                "{:<13} kernels {:<10}  {:>6} params  features {:>4}  first row [{}]",
                spec.name(),
                format!("{:?}", spec.kernel_sizes),
                model.params().count(),
                spec.feature_dim(),
                row.join(", ")
            );
        }
    }

    let spec = ModelSpec::new(ExtractorKind::MultiscaleResidual, HeadKind::Ovrn, classes, window, variables);
    let model = Model::build(&spec, 3)?;
    let path = std::env::temp_dir().join("openset-architectures-example.json");
    model.save(&path)?;
    let back = Model::load(&path)?;
    println!("reloaded {} with fingerprint {}", back.spec().name(), back.fingerprint());
    assert_eq!(back.fingerprint(), model.fingerprint());
    Ok(())
}
