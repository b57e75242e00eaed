//! Collective scores, per-class threshold calibration and the three
//! accept/reject rules on a handful of probability rows.
//!
//! cargo run --example collective_decision

use openset::datapipe::ClassMap;
use openset::decision::{calibrate_scores, collective_scores, decide, decide_with, RuleKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> openset::Result<()> {
    let classes = ClassMap::new(vec![1, 2, 3])?;

    // Pretend calibration data: for class k, a confident k-th output and
    // low others.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            (0..200)
                .map(|_| {
                    let p: Vec<f64> = (0..3)
                        .map(|j| if j == k { rng.random_range(0.6..0.99) } else { rng.random_range(0.01..0.3) })
                        .collect();
                    collective_scores(&p).map(|s| s[k])
                })
                .collect::<openset::Result<Vec<f64>>>()
        })
        .collect::<openset::Result<_>>()?;
    let thresholds = calibrate_scores(&scores, 0.05, &classes)?;
    print!("{}", thresholds.to_table());

    let rows: [[f64; 3]; 4] = [[0.9, 0.1, 0.1], [0.7, 0.6, 0.1], [0.2, 0.15, 0.1], [0.55, 0.05, 0.9]];
    println!("\n{:<20} {:>28} {:>12} {:>12} {:>12}", "p", "S", "collective", "softmax", "ovrn max");
    for p in rows {
        let s = collective_scores(&p)?;
        let show = |d: openset::decision::Decision| d.predicted().map_or("UNKNOWN".to_string(), |k| classes.label_of(k).to_string());
        println!(
            "{:<20} {:>28} {:>12} {:>12} {:>12}",
            format!("{p:?}"),
            format!("[{:.2}, {:.2}, {:.2}]", s[0], s[1], s[2]),
            show(decide(&s, &thresholds)?),
            show(decide_with(RuleKind::SoftmaxBaseline, &p, None)?),
            show(decide_with(RuleKind::OvrnMaxBaseline, &p, None)?),
        );
    }
    Ok(())
}
