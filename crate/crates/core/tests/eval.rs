use std::path::PathBuf;

use openset::datapipe::{ClassMap, StateLabel, WindowSet};
use openset::decision::{Decision, DecisionThresholds, RuleKind};
use openset::eval::{
    evaluate, model_windows, run_experiment, run_repetition, truth_index, AveragedReport, EvaluationReport,
    ExperimentConfig, PreparedData, ReportMetadata, ScoreHistogram, HISTOGRAM_BINS,
};
use openset::modelzoo::Model;
use openset::Error;
use proptest::prelude::*;

fn meta() -> ReportMetadata {
    ReportMetadata {
        model: "hand".into(),
        model_fingerprint: String::new(),
        thresholds_fingerprint: None,
        probability_hash: String::new(),
        seed: None,
    }
}

fn d(winner: usize, accepted: bool, score: f64) -> Decision {
    Decision { winner, score, accepted }
}

fn small_config() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/small_synthetic.toml");
    let mut c = ExperimentConfig::load(path).unwrap();
    c.max_epochs = 3;
    c.repetitions = 1;
    c
}

#[test]
fn six_window_hand_tally() {
    // K = 2 (states 10, 20). Truth and decisions, tallied by hand:
    //   w0 10 -> 10   w1 10 -> UNK   w2 20 -> 20
    //   w3 20 -> 10   w4 UNK -> UNK  w5 UNK -> 20
    let truth = [0, 0, 1, 1, 2, 2];
    let decisions = [
        d(0, true, 3.0),
        d(0, false, 0.5),
        d(1, true, 2.0),
        d(0, true, 1.0),
        d(1, false, -1.0),
        d(1, true, 1.5),
    ];
    let r = EvaluationReport::tally(RuleKind::Collective, &[10, 20], &truth, &decisions, meta()).unwrap();
    assert_eq!(r.confusion, vec![vec![1, 0, 1], vec![1, 1, 0], vec![0, 1, 1]]);
    assert_eq!(r.per_class_accuracy, vec![Some(0.5), Some(0.5)]);
    assert_eq!(r.ufc, Some(0.5));
    assert_eq!(r.mean_known_accuracy, Some(0.5));
    assert_eq!(r.overall_accuracy, 0.5);
    assert_eq!(r.windows, 6);
    assert_eq!(r.histogram.known.iter().sum::<u64>(), 4);
    assert_eq!(r.histogram.unknown.iter().sum::<u64>(), 2);
    assert_eq!(r.histogram.edges.len(), HISTOGRAM_BINS + 1);
    assert_eq!((r.histogram.edges[0], r.histogram.edges[HISTOGRAM_BINS]), (-1.0, 3.0));
    assert_eq!(r.histogram.known[HISTOGRAM_BINS - 1], 1);
    assert_eq!(r.histogram.unknown[0], 1);

    let csv = r.confusion_csv();
    assert_eq!(csv, "truth,10,20,UNKNOWN\n10,1,0,1\n20,1,1,0\nUNKNOWN,0,1,1\n");
}

#[test]
fn perfect_and_rejecting_classifiers() {
    let truth = [0, 1, 2, 0, 2, 1, 3, 3];
    let perfect: Vec<Decision> = truth.iter().map(|&t| if t == 3 { d(0, false, 0.0) } else { d(t, true, 1.0) }).collect();
    let r = EvaluationReport::tally(RuleKind::Collective, &[1, 2, 3], &truth, &perfect, meta()).unwrap();
    assert_eq!(r.overall_accuracy, 1.0);
    assert_eq!(r.ufc, Some(1.0));
    for (i, row) in r.confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            assert_eq!(c > 0, i == j);
        }
    }

    let reject: Vec<Decision> = truth.iter().map(|_| d(1, false, 0.0)).collect();
    let r = EvaluationReport::tally(RuleKind::Collective, &[1, 2, 3], &truth, &reject, meta()).unwrap();
    assert_eq!(r.ufc, Some(1.0));
    assert_eq!(r.per_class_accuracy, vec![Some(0.0); 3]);
    assert_eq!(r.overall_accuracy, 0.25);
}

#[test]
fn tally_without_unknowns_has_no_ufc() {
    let r = EvaluationReport::tally(RuleKind::SoftmaxBaseline, &[1, 2], &[0, 1], &[d(0, true, 0.9), d(0, true, 0.8)], meta())
        .unwrap();
    assert_eq!(r.ufc, None);
    assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(0.0)]);
    assert!(EvaluationReport::tally(RuleKind::SoftmaxBaseline, &[1, 2], &[0], &[], meta()).is_err());
    assert!(EvaluationReport::tally(RuleKind::SoftmaxBaseline, &[1, 2], &[3], &[d(0, true, 0.9)], meta()).is_err());
}

#[test]
fn truth_index_maps_foreign_states_to_unknown() {
    let classes = ClassMap::new(vec![2, 5]).unwrap();
    assert_eq!(truth_index(StateLabel::Id(5), &classes), 1);
    assert_eq!(truth_index(StateLabel::Id(3), &classes), 2);
    assert_eq!(truth_index(StateLabel::Unknown, &classes), 2);
}

proptest! {
    #[test]
    fn tally_conserves_counts(rows in prop::collection::vec((0usize..4, 0usize..3, any::<bool>(), -20.0f64..20.0), 1..200)) {
        let truth: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let decisions: Vec<Decision> = rows.iter().map(|r| d(r.1, r.2, r.3)).collect();
        let r = EvaluationReport::tally(RuleKind::Collective, &[1, 2, 3], &truth, &decisions, meta()).unwrap();
        for (t, row) in r.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<u64>(), truth.iter().filter(|&&x| x == t).count() as u64);
        }
        let trace: u64 = (0..4).map(|i| r.confusion[i][i]).sum();
        prop_assert!((r.overall_accuracy - trace as f64 / truth.len() as f64).abs() < 1e-12);
        let unknown = truth.iter().filter(|&&t| t == 3).count() as u64;
        prop_assert_eq!(r.histogram.unknown.iter().sum::<u64>(), unknown);
        prop_assert_eq!(r.histogram.known.iter().sum::<u64>(), truth.len() as u64 - unknown);

        // CSV rows carry the same sums.
        let csv = r.confusion_csv();
        for (t, line) in csv.lines().skip(1).enumerate() {
            let total: u64 = line.split(',').skip(1).map(|c| c.parse::<u64>().unwrap()).sum();
            prop_assert_eq!(total, truth.iter().filter(|&&x| x == t).count() as u64);
        }
    }

    #[test]
    fn histogram_partitions_samples(known in prop::collection::vec(-5.0f64..5.0, 0..60), unknown in prop::collection::vec(-5.0f64..5.0, 0..60)) {
        let h = ScoreHistogram::build(&known, &unknown, 7);
        prop_assert_eq!(h.known.iter().sum::<u64>(), known.len() as u64);
        prop_assert_eq!(h.unknown.iter().sum::<u64>(), unknown.len() as u64);
        prop_assert!(h.edges.windows(2).all(|e| e[0] < e[1]));
        prop_assert_eq!(h.to_csv().lines().count(), 8);
    }
}

#[test]
fn single_repetition_average_is_the_run() {
    let result = run_experiment(&small_config()).unwrap();
    assert_eq!(result.repetitions.len(), 1);
    assert_eq!(result.averaged.len(), 2);
    for (avg, report) in result.averaged.iter().zip(&result.repetitions[0].reports) {
        assert_eq!(avg.runs, 1);
        assert_eq!(avg.per_class_accuracy, report.per_class_accuracy);
        assert_eq!(avg.ufc, report.ufc);
        assert_eq!(avg.mean_known_accuracy, report.mean_known_accuracy);
        assert_eq!(avg.overall_accuracy, report.overall_accuracy);
        assert_eq!(avg.overall_accuracy_std, 0.0);
        assert_eq!(avg.confusion_sum, report.confusion);
    }
    assert!(result.summary().contains("UFC"));
}

#[test]
fn equal_runs_average_to_either() {
    let config = small_config();
    let data = PreparedData::load(&config).unwrap();
    let (_, a) = run_repetition(&config, &data, 0, |_| {}).unwrap();
    let (_, b) = run_repetition(&config, &data, 0, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.reports, b.reports);
    let avg = AveragedReport::from_reports(&[&a.reports[0], &b.reports[0]]).unwrap();
    assert_eq!(avg.runs, 2);
    assert_eq!(avg.per_class_accuracy, a.reports[0].per_class_accuracy);
    assert_eq!(avg.ufc, a.reports[0].ufc);
    assert_eq!(avg.overall_accuracy, a.reports[0].overall_accuracy);
    assert_eq!(avg.overall_accuracy_std, 0.0);
    let doubled: Vec<Vec<u64>> = a.reports[0].confusion.iter().map(|r| r.iter().map(|c| 2 * c).collect()).collect();
    assert_eq!(avg.confusion_sum, doubled);

    // Different rules do not average together.
    assert!(AveragedReport::from_reports(&[&a.reports[0], &a.reports[1]]).is_err());
}

#[test]
fn rules_share_one_probability_stream() {
    let config = small_config();
    let data = PreparedData::load(&config).unwrap();
    let (_, rep) = run_repetition(&config, &data, 0, |_| {}).unwrap();
    let [collective, baseline] = &rep.reports[..] else { panic!("two rules expected") };
    assert_eq!(collective.rule, RuleKind::Collective);
    assert_eq!(baseline.rule, RuleKind::OvrnMaxBaseline);
    assert_eq!(collective.metadata.probability_hash, baseline.metadata.probability_hash);
    assert_eq!(collective.metadata.model_fingerprint, baseline.metadata.model_fingerprint);
    assert!(collective.metadata.thresholds_fingerprint.is_some());
    assert!(baseline.metadata.thresholds_fingerprint.is_none());
}

#[test]
fn evaluate_on_saved_artifacts_is_idempotent() {
    let config = small_config();
    let data = PreparedData::load(&config).unwrap();
    let (model, rep) = run_repetition(&config, &data, 0, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path().join("model.json")).unwrap();
    rep.thresholds.as_ref().unwrap().save(dir.path().join("thresholds.json")).unwrap();

    let (_, test_runs) = config.load_runs().unwrap();
    let reload = || {
        let model = Model::load(dir.path().join("model.json")).unwrap();
        let t = DecisionThresholds::load(dir.path().join("thresholds.json")).unwrap();
        let windows = model_windows(&model, &test_runs, config.stride).unwrap();
        evaluate(&model, &windows, RuleKind::Collective, Some(&t), 64).unwrap()
    };
    let first = reload();
    assert_eq!(first, reload());
    assert_eq!(first, rep.reports[0]);

    // Export and reload gives the same report; artifact files exist.
    first.export(dir.path(), "evaluate_collective").unwrap();
    let back = EvaluationReport::load(dir.path().join("evaluate_collective.json")).unwrap();
    assert_eq!(back, first);
    let csv = std::fs::read_to_string(dir.path().join("evaluate_collective_confusion.csv")).unwrap();
    assert_eq!(csv, first.confusion_csv());
    let hist = std::fs::read_to_string(dir.path().join("evaluate_collective_histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), HISTOGRAM_BINS + 1);
}

#[test]
fn evaluate_rejects_mismatched_variables() {
    let config = small_config();
    let data = PreparedData::load(&config).unwrap();
    let (model, rep) = run_repetition(&config, &data, 0, |_| {}).unwrap();
    let mut narrow = WindowSet::empty(config.window, config.variables - 1);
    narrow.push(&vec![0.0; config.window * (config.variables - 1)], Some(StateLabel::Id(1))).unwrap();
    let err = evaluate(&model, &narrow, RuleKind::Collective, rep.thresholds.as_ref(), 64).unwrap_err();
    assert!(matches!(err, Error::Dimension { axis: "variables", .. }), "{err}");

    // Thresholds for another class set are refused.
    let mut other = rep.thresholds.clone().unwrap();
    other.class_ids[0] = 99;
    assert!(evaluate(&model, &data.test, RuleKind::Collective, Some(&other), 64).is_err());
    assert!(evaluate(&model, &data.test, RuleKind::Collective, None, 64).is_err());
}

#[test]
fn experiment_export_writes_every_artifact() {
    let mut config = small_config();
    config.repetitions = 2;
    config.max_epochs = 1;
    let result = run_experiment(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    result.export(dir.path()).unwrap();
    for f in [
        "effective_config.toml",
        "summary.txt",
        "experiment.json",
        "collective_confusion_sum.csv",
        "rep00/collective.json",
        "rep01/ovrn_max_baseline_histogram.csv",
        "rep01/thresholds.json",
        "rep01/model.json",
        "rep00/train_log.jsonl",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let echoed = ExperimentConfig::load(dir.path().join("effective_config.toml")).unwrap();
    assert_eq!(echoed.repetitions, 2);
    assert_eq!(result.repetitions[1].seed, config.seed + 1);
}

#[test]
fn bad_configs_are_refused() {
    for text in ["repetitions = 0", "rule = \"vote\"", "quantile = 1.5", "source = \"csv\"", "window = 0"] {
        assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
    }
    let c = ExperimentConfig::from_toml("").unwrap();
    assert_eq!(c.repetitions, 1);
    assert_eq!(c.rule, RuleKind::Collective);
}
