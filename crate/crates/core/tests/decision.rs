use openset::datapipe::{ClassMap, StateLabel, WindowSet};
use openset::decision::{
    argmax, calibrate, calibrate_scores, collective_scores, decide, decide_ovrn_max_baseline, decide_softmax_baseline,
    decide_with, lower_quantile, DecisionThresholds, RuleKind,
};
use openset::modelzoo::{ExtractorKind, HeadKind, Model, ModelSpec};
use openset::training::{train, TrainConfig};
use openset::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn thresholds(eps: &[f64]) -> DecisionThresholds {
    DecisionThresholds {
        epsilon: eps.to_vec(),
        quantile: 0.05,
        counts: vec![100; eps.len()],
        class_ids: (1..=eps.len() as i64).collect(),
        fingerprint: String::new(),
    }
}

#[test]
fn collective_scores_three_class_example() {
    let (l9, l1) = (0.9f64.ln(), 0.1f64.ln());
    let s1 = l9 - 0.5 * (l1 + l1);
    let s2 = l1 - 0.5 * (l9 + l1);
    // S[1] = ln 9, S[2] = S[3] = ½ ln(1/9) = -ln 3
    assert!((s1 - 9f64.ln()).abs() < 1e-12);
    assert!((s2 + 3f64.ln()).abs() < 1e-12);
    assert!((s1 - 2.1972).abs() < 1e-4);
    assert!((s2 - -1.0986).abs() < 1e-4);

    let s = collective_scores(&[0.9, 0.1, 0.1]).unwrap();
    assert!((s[0] - s1).abs() < 1e-12);
    assert!((s[1] - s2).abs() < 1e-12);
    assert_eq!(s[1], s[2]);
}

#[test]
fn collective_scores_of_equal_probabilities_vanish() {
    for k in 2..8 {
        for p in [1e-9, 0.2, 0.5, 0.999] {
            let s = collective_scores(&vec![p; k]).unwrap();
            assert!(s.iter().all(|v| v.abs() < 1e-12), "{k} {p} {s:?}");
        }
    }
}

#[test]
fn collective_scores_need_two_classes() {
    assert!(collective_scores(&[0.7]).is_err());
    assert!(collective_scores(&[]).is_err());
}

#[test]
fn decide_examples() {
    let s = [2.1972, -1.1513, -1.1513];
    let d = decide(&s, &thresholds(&[0.0, 0.0, 0.0])).unwrap();
    assert_eq!(d.predicted(), Some(0));
    assert_eq!(d.winner, 0);
    assert_eq!(d.score, 2.1972);

    let d = decide(&s, &thresholds(&[5.0, 5.0, 5.0])).unwrap();
    assert_eq!(d.predicted(), None);
    assert!(!d.accepted);

    // Cutoff met with equality is accepted.
    let d = decide(&s, &thresholds(&[2.1972, 9.0, 9.0])).unwrap();
    assert!(d.accepted);
    let d = decide(&s, &thresholds(&[f64::from_bits(2.1972f64.to_bits() + 1), 9.0, 9.0])).unwrap();
    assert!(!d.accepted);
}

#[test]
fn decide_breaks_ties_towards_the_smaller_index() {
    let d = decide(&[1.0, 3.0, 3.0], &thresholds(&[0.0; 3])).unwrap();
    assert_eq!(d.winner, 1);
    assert_eq!(argmax(&[0.2, 0.2]), 0);
}

#[test]
fn decide_checks_class_count() {
    let err = decide(&[1.0, 2.0], &thresholds(&[0.0; 3])).unwrap_err();
    assert!(matches!(err, Error::Dimension { expected: 3, found: 2, .. }), "{err}");
}

#[test]
fn baseline_examples() {
    assert_eq!(decide_softmax_baseline(&[0.7, 0.2, 0.1], 0.5).predicted(), Some(0));
    assert_eq!(decide_softmax_baseline(&[0.4, 0.35, 0.25], 0.5).predicted(), None);
    assert_eq!(decide_softmax_baseline(&[0.5, 0.3, 0.2], 0.5).predicted(), None);
    assert_eq!(decide_ovrn_max_baseline(&[0.45, 0.4], 0.5).predicted(), None);
    assert_eq!(decide_ovrn_max_baseline(&[0.6, 0.7], 0.5).predicted(), Some(1));
    assert_eq!(decide_ovrn_max_baseline(&[0.9, 0.95, 0.2], 0.5).predicted(), Some(1));
}

#[test]
fn decide_with_routes_rules() {
    let p = [0.9, 0.1, 0.1];
    let t = thresholds(&[3.0, 0.0, 0.0]);
    assert!(!decide_with(RuleKind::Collective, &p, Some(&t)).unwrap().accepted);
    assert!(decide_with(RuleKind::Collective, &p, None).is_err());
    assert!(decide_with(RuleKind::SoftmaxBaseline, &p, None).unwrap().accepted);
    assert!(decide_with(RuleKind::OvrnMaxBaseline, &p, None).unwrap().accepted);
    for rule in [RuleKind::Collective, RuleKind::SoftmaxBaseline, RuleKind::OvrnMaxBaseline] {
        assert_eq!(rule.name().parse::<RuleKind>().unwrap(), rule);
    }
    assert!("max_softmax".parse::<RuleKind>().is_err());
}

#[test]
fn quantile_on_one_to_hundred() {
    let s: Vec<f64> = (1..=100).map(f64::from).collect();
    let eps = lower_quantile(&s, 0.05).unwrap();
    assert_eq!(eps, 6.0);
    assert_eq!(s.iter().filter(|&&v| v >= eps).count(), 95);
    // One step lower would accept 96: not the largest valid cutoff.
    assert_eq!(s.iter().filter(|&&v| v >= 5.0).count(), 96);

    let classes = ClassMap::new(vec![3, 8]).unwrap();
    let t = calibrate_scores(&[s.clone(), vec![-1.5; 40]], 0.05, &classes).unwrap();
    assert_eq!(t.epsilon, vec![6.0, -1.5]);
    assert_eq!(t.counts, vec![100, 40]);
    assert_eq!(t.acceptance(1, &[-1.5; 40]), 1.0);
}

#[test]
fn calibration_names_the_short_class() {
    let classes = ClassMap::new(vec![3, 8]).unwrap();
    let err = calibrate_scores(&[vec![0.0; 25], vec![0.0; 19]], 0.05, &classes).unwrap_err();
    match &err {
        Error::Calibration { class, count, required } => {
            assert_eq!(class, "8");
            assert_eq!((*count, *required), (19, 20));
        }
        other => panic!("{other}"),
    }
    assert!(err.to_string().contains('8'));
    assert!(calibrate_scores(&[vec![0.0; 25]], 0.05, &classes).is_err());
}

#[test]
fn thresholds_round_trip_and_reject_other_versions() {
    let mut t = thresholds(&[1.25, -0.1 / 3.0, 7.0]);
    t.fingerprint = "abc".into();
    let back = DecisionThresholds::from_json(&t.to_json().unwrap()).unwrap();
    assert_eq!(back, t);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    t.save(&path).unwrap();
    assert_eq!(DecisionThresholds::load(&path).unwrap(), t);

    let bumped = t.to_json().unwrap().replace("\"version\": 1", "\"version\": 99");
    assert!(matches!(DecisionThresholds::from_json(&bumped), Err(Error::Version { found: 99, .. })));
    assert!(DecisionThresholds::from_json("{\"epsilon\": [1.0]}").is_err());

    let table = t.to_table();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(1).unwrap().starts_with("1\t1.25\t"));
}

fn toy(per_class: usize, seed: u64) -> (WindowSet, ClassMap) {
    let (w, m) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = WindowSet::empty(w, m);
    for i in 0..3 * per_class {
        let class = i % 3;
        let level = class as f64 - 1.0;
        let data: Vec<f64> = (0..w * m).map(|_| level + rng.random_range(-1.0..1.0)).collect();
        set.push(&data, Some(StateLabel::Id(class as i64 + 1))).unwrap();
    }
    (set, ClassMap::new(vec![1, 2, 3]).unwrap())
}

fn trained(windows: &WindowSet, classes: &ClassMap) -> Model {
    let mut spec = ModelSpec::new(ExtractorKind::Standard, HeadKind::Ovrn, 3, 8, 4);
    spec.kernel_sizes = vec![3];
    spec.channels = vec![4, 4];
    spec.ovrn_hidden = 8;
    let mut model = Model::build(&spec, 1).unwrap();
    let config = TrainConfig {
        batch_size: 32,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    train(&mut model, windows, classes, &config).unwrap();
    model
}

#[test]
fn calibrated_model_covers_its_training_windows() {
    let (windows, classes) = toy(120, 2);
    let model = trained(&windows, &classes);
    let t = calibrate(&model, &windows, 0.05, 64).unwrap();
    assert_eq!(t.counts, vec![120; 3]);
    let probs = model.predict_proba(&windows, 64).unwrap();
    for k in 0..3 {
        let scores: Vec<f64> = (0..windows.len())
            .filter(|&i| windows.states()[i] == Some(StateLabel::Id(k as i64 + 1)))
            .map(|i| collective_scores(probs.row(i)).unwrap()[k])
            .collect();
        let rate = t.acceptance(k, &scores);
        assert!((0.95..=0.95 + 1.0 / 120.0).contains(&rate), "class {k}: {rate}");
    }

    // Same model and data, same cutoffs and fingerprint.
    let again = calibrate(&model, &windows, 0.05, 17).unwrap();
    assert_eq!(again, t);
    assert_eq!(t.fingerprint.len(), 32);
}

#[test]
fn calibration_requires_a_trained_model() {
    let (windows, _) = toy(30, 0);
    let spec = ModelSpec::new(ExtractorKind::Standard, HeadKind::Ovrn, 3, 8, 4);
    let model = Model::build(&spec, 0).unwrap();
    assert!(calibrate(&model, &windows, 0.05, 64).is_err());
}

proptest! {
    #[test]
    fn scores_follow_permutations(p in prop::collection::vec(0.001f64..1.0, 2..8), rot in 0usize..8) {
        let k = p.len();
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let permuted: Vec<f64> = perm.iter().map(|&j| p[j]).collect();
        let s = collective_scores(&p).unwrap();
        let sp = collective_scores(&permuted).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            prop_assert!((sp[i] - s[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn scores_rise_with_own_probability(p in prop::collection::vec(0.001f64..0.9, 2..8), k in 0usize..8, bump in 0.001f64..0.09) {
        let k = k % p.len();
        let mut q = p.clone();
        q[k] += bump;
        let before = collective_scores(&p).unwrap();
        let after = collective_scores(&q).unwrap();
        prop_assert!(after[k] > before[k]);
        for j in (0..p.len()).filter(|&j| j != k) {
            prop_assert!(after[j] < before[j]);
        }
    }

    #[test]
    fn score_argmax_matches_probability_argmax(p in prop::collection::vec(0.001f64..1.0, 2..8)) {
        let best = argmax(&p);
        prop_assume!(p.iter().enumerate().all(|(i, &v)| i == best || v < p[best] - 1e-9));
        prop_assert_eq!(argmax(&collective_scores(&p).unwrap()), best);
    }

    #[test]
    fn calibration_coverage_is_tight(scores in prop::collection::vec(-50.0f64..50.0, 20..400)) {
        let classes = ClassMap::new(vec![1, 2]).unwrap();
        let t = calibrate_scores(&[scores.clone(), scores.clone()], 0.05, &classes).unwrap();
        let rate = t.acceptance(0, &scores);
        let n = scores.len() as f64;
        // Ties only ever push coverage up; distinct draws stay in the band.
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        prop_assert!(rate >= 0.95);
        if sorted.len() == scores.len() {
            prop_assert!(rate <= 0.95 + 1.0 / n + 1e-12, "{} of {}", rate, n);
        }
    }
}
