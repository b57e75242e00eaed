//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=name,name` restricts the run to the named criteria.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use openset::datapipe::{
    generate_synthetic, window, write_runs_csv, RawRun, StateLabel, SyntheticSpec, WindowSet,
};
use openset::decision::{calibrate, collective_scores, RuleKind};
use openset::eval::{run_experiment, ExperimentConfig, PreparedData};
use openset::modelzoo::{ExtractorKind, HeadKind, Model, ModelSpec};
use openset::numcore::gradcheck::check_gradients;
use openset::numcore::{BatchNormConfig, Mode, Padding, RunningStats, Tape, Tensor, Var};
use openset::training::{train, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn contract(tape: &mut Tape, y: Var, seed: u64) -> openset::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(tape.value(y).shape(), &mut rng);
    let rv = tape.constant(r);
    let prod = tape.mul(y, rv)?;
    Ok(tape.sum(prod))
}

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    let mut record = |name: &'static str, r: openset::Result<openset::numcore::gradcheck::GradCheckReport>| -> Result<(), String> {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        checked += r.checked;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
        ensure(r.max_rel_error < TOL, || format!("{name}: {r:?}"))
    };

    let conv_in = [random(&[2, 2, 6, 5], &mut rng), random(&[3, 2, 3, 2], &mut rng), random(&[3], &mut rng)];
    for (name, padding) in [("conv2d same", Padding::Same), ("conv2d valid", Padding::Valid)] {
        record(name, check_gradients(&conv_in, STEP, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], padding)?;
            contract(t, y, 1)
        }))?;
    }
    record("maxpool2d", check_gradients(&[random(&[2, 3, 5, 4], &mut rng)], STEP, |t, v| {
        let y = t.maxpool2d(v[0], (2, 2), (2, 2))?;
        contract(t, y, 2)
    }))?;
    let dense_in = [random(&[3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng)];
    record("dense+relu", check_gradients(&dense_in, STEP, |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        let y = t.relu(y);
        contract(t, y, 3)
    }))?;
    let bn_in = [random(&[3, 2, 2, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    for (name, mode) in [("batchnorm train", Mode::Train), ("batchnorm infer", Mode::Infer)] {
        record(name, check_gradients(&bn_in, STEP, |t, v| {
            let mut stats = RunningStats { mean: vec![0.1, -0.2], var: vec![0.7, 1.3] };
            let y = t.batchnorm(v[0], v[1], v[2], &mut stats, mode, BatchNormConfig::default())?;
            contract(t, y, 4)
        }))?;
    }
    let mix_in = [random(&[3, 4], &mut rng).map(|v| 3.0 * v), random(&[3, 2], &mut rng)];
    record("sigmoid softmax concat reshape add mul", check_gradients(&mix_in, STEP, |t, v| {
        let s = t.sigmoid(v[0]);
        let p = t.softmax(v[1])?;
        let c = t.concat_cols(&[s, p, v[1]])?;
        let r = t.reshape(c, vec![2, 12])?;
        let f = t.flatten(r)?;
        let sq = t.mul(f, f)?;
        let y = t.add(sq, f)?;
        contract(t, y, 6)
    }))?;
    let logits = [random(&[5, 3], &mut rng).map(|v| 2.0 * v)];
    let labels = [0usize, 2, 1, 2, 0];
    record("binary cross-entropy", check_gradients(&logits, STEP, |t, v| {
        let p = t.sigmoid(v[0]);
        t.binary_cross_entropy(p, &labels)
    }))?;
    record("cross-entropy", check_gradients(&logits, STEP, |t, v| {
        let p = t.softmax(v[0])?;
        t.cross_entropy(p, &labels)
    }))?;

    // Full one-vs-rest loss through a multi-scale residual network, every
    // parameter entry perturbed.
    let mut spec = ModelSpec::new(ExtractorKind::MultiscaleResidual, HeadKind::Ovrn, 3, 8, 6);
    spec.kernel_sizes = vec![1, 3];
    spec.channels = vec![2, 3];
    spec.ovrn_hidden = 4;
    let model = Model::build(&spec, 7).map_err(e2s)?;
    let x = random(&[4, 1, 8, 6], &mut rng).map(|v| 2.0 * v);
    let y = [0usize, 1, 2, 1];
    let loss_of = |m: &Model, grads: bool| -> openset::Result<(f64, Vec<Tensor>)> {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let f = m.forward(&mut tape, input, Mode::Train)?;
        let loss = tape.binary_cross_entropy(f.output, &y)?;
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, f.params.iter().map(|&p| g.wrt(p)).collect()))
    };
    let (_, analytic) = loss_of(&model, true).map_err(e2s)?;
    let mut model_worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let mut plus = model.clone();
            plus.params_mut().values_mut()[pi].data_mut()[e] += STEP;
            let mut minus = model.clone();
            minus.params_mut().values_mut()[pi].data_mut()[e] -= STEP;
            let numeric = (loss_of(&plus, false).map_err(e2s)?.0 - loss_of(&minus, false).map_err(e2s)?.0) / (2.0 * STEP);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            model_worst = model_worst.max(rel);
            checked += 1;
        }
    }
    ensure(model_worst < TOL, || format!("MRCNN-OVRN loss: worst relative error {model_worst:.2e}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{checked} entries, worst op {:.2e} ({}), full loss {model_worst:.2e}, {secs:.1}s",
        worst.0, worst.1
    ))
}

fn score_identities() -> Outcome {
    let s = collective_scores(&[0.9, 0.1, 0.1]).map_err(e2s)?;
    ensure((s[0] - 2.1972).abs() < 1e-4, || format!("S[1] = {}", s[0]))?;
    ensure((s[0] - 9f64.ln()).abs() < 1e-12, || format!("S[1] = {} vs ln 9", s[0]))?;
    for k in 2..=10 {
        for p in [1e-12, 0.01, 0.3, 1.0 / k as f64, 0.99] {
            let s = collective_scores(&vec![p; k]).map_err(e2s)?;
            ensure(s.iter().all(|v| v.abs() < 1e-12), || format!("all-equal K={k} p={p}: {s:?}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let k = rng.random_range(2..9);
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(1e-4..1.0)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let s = collective_scores(&p).map_err(e2s)?;
        let sp = collective_scores(&perm.iter().map(|&j| p[j]).collect::<Vec<_>>()).map_err(e2s)?;
        for (i, &j) in perm.iter().enumerate() {
            ensure((sp[i] - s[j]).abs() < 1e-9, || format!("permutation {perm:?} of {p:?}"))?;
        }
    }
    Ok(format!("S[1] = {:.6}, 500 permutations", s[0]))
}

fn calibration_coverage() -> Outcome {
    let started = Instant::now();
    let spec = SyntheticSpec {
        known_classes: 3,
        unknown_classes: 1,
        variables: 6,
        run_length: 60,
        train_runs_per_class: 6,
        test_runs_per_class: 1,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let runs = generate_synthetic(&spec).map_err(e2s)?;
    let data = PreparedData::from_runs(&runs.train, &runs.test, 20, 1).map_err(e2s)?;
    let mut lines = Vec::new();
    for (extractor, head) in [(ExtractorKind::MultiscaleResidual, HeadKind::Ovrn), (ExtractorKind::Standard, HeadKind::Softmax)] {
        let mut mspec = ModelSpec::new(extractor, head, 3, 20, 6);
        mspec.channels = vec![4, 8];
        let mut model = Model::build(&mspec, 3).map_err(e2s)?;
        let config = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &data.train, &data.classes, &config).map_err(e2s)?;
        let t = calibrate(&model, &data.train, 0.05, 128).map_err(e2s)?;
        let probs = model.predict_proba(&data.train, 128).map_err(e2s)?;
        let mut rates = Vec::new();
        for k in 0..3 {
            let want = Some(data.classes.label_of(k));
            let scores: Vec<f64> = (0..data.train.len())
                .filter(|&i| data.train.states()[i] == want)
                .map(|i| collective_scores(probs.row(i)).map(|s| s[k]))
                .collect::<openset::Result<_>>()
                .map_err(e2s)?;
            ensure(scores.len() >= 100, || format!("class {k}: only {} windows", scores.len()))?;
            let rate = t.acceptance(k, &scores);
            ensure((0.95..=0.96).contains(&rate), || format!("{}: class {k} acceptance {rate}", model.spec().name()))?;
            rates.push(format!("{rate:.4}"));
        }
        lines.push(format!("{} [{}]", model.spec().name(), rates.join(" ")));
    }
    Ok(format!(
        "{} windows/class; {}; {:.1}s",
        data.train.len() / 3,
        lines.join(", "),
        started.elapsed().as_secs_f64()
    ))
}

fn windowing_counts() -> Outcome {
    let mut got = Vec::new();
    for (n, want) in [(500usize, 481usize), (960, 941)] {
        let m = 15;
        let run = RawRun::new(format!("n{n}"), StateLabel::Id(1), m, (0..n * m).map(|v| v as f64).collect())
            .map_err(e2s)?;
        let samples = window(&run, 20, 1).map_err(e2s)?;
        let set = WindowSet::from_runs(&[run], 20, 1).map_err(e2s)?;
        ensure(samples.len() == want && set.len() == want, || format!("n={n}: {} windows", samples.len()))?;
        ensure(set.rows() == 20 && set.cols() == m, || format!("window shape {}x{}", set.rows(), set.cols()))?;
        got.push(format!("{want} x 20 x {m}"));
    }
    Ok(got.join(", "))
}

fn desk_benchmark() -> Outcome {
    let started = Instant::now();
    let base = ExperimentConfig::load(config_path("desk_benchmark.toml")).map_err(e2s)?;
    let run = |extractor, head, rule, compare: Vec<RuleKind>| -> Result<(f64, f64), String> {
        let config = ExperimentConfig {
            extractor,
            head,
            rule,
            compare_rules: compare,
            ..base.clone()
        };
        let t = Instant::now();
        let result = run_experiment(&config).map_err(e2s)?;
        let a = result.averaged_for(rule).ok_or("missing averaged report")?;
        let (ufc, known) = (a.ufc.ok_or("no unknown windows")?, a.mean_known_accuracy.ok_or("no known windows")?);
        eprintln!(
            "  {}-{} / {}: UFC {ufc:.4}, mean known {known:.4}, overall {:.4} ± {:.4} ({} runs, {:.0}s)",
            extractor.short_name(),
            head.short_name(),
            rule.name(),
            a.overall_accuracy,
            a.overall_accuracy_std,
            a.runs,
            t.elapsed().as_secs_f64()
        );
        Ok((ufc, known))
    };
    let (ufc, known) = run(ExtractorKind::MultiscaleResidual, HeadKind::Ovrn, RuleKind::Collective, Vec::new())?;
    let (soft_ufc, _) = run(ExtractorKind::MultiscaleResidual, HeadKind::Softmax, RuleKind::SoftmaxBaseline, Vec::new())?;
    let (cnn_ufc, _) = run(ExtractorKind::Standard, HeadKind::Ovrn, RuleKind::Collective, Vec::new())?;
    let secs = started.elapsed().as_secs_f64();
    let summary = format!(
        "MRCNN-OVRN UFC {ufc:.4} known {known:.4}; MRCNN-Softmax UFC {soft_ufc:.4}; CNN-OVRN UFC {cnn_ufc:.4}; {:.1} min",
        secs / 60.0
    );
    ensure(ufc >= 0.60 && known >= 0.80, || format!("(a) failed: {summary}"))?;
    ensure(ufc - soft_ufc >= 0.15, || format!("(b) failed: {summary}"))?;
    ensure(ufc >= cnn_ufc - 0.05, || format!("(c) failed: {summary}"))?;
    ensure(secs < 30.0 * 60.0, || format!("over budget: {summary}"))?;
    Ok(summary)
}

fn openset_bin(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_openset"))
        .args(args)
        .env_remove("OPENSET_OUTPUT_DIR")
        .output()
        .map_err(e2s)
}

fn determinism() -> Outcome {
    let mut config = ExperimentConfig::load(config_path("small_synthetic.toml")).map_err(e2s)?;
    config.max_epochs = 4;
    let a = run_experiment(&config).map_err(e2s)?;
    config.threads = 2;
    let b = run_experiment(&config).map_err(e2s)?;
    for (x, y) in a.repetitions.iter().zip(&b.repetitions) {
        ensure(x.log == y.log, || format!("repetition {} logs differ", x.index))?;
        ensure(x.reports == y.reports, || format!("repetition {} reports differ", x.index))?;
        ensure(x.thresholds == y.thresholds, || format!("repetition {} thresholds differ", x.index))?;
    }
    ensure(a.averaged == b.averaged, || "averaged reports differ".into())?;

    // Two separate processes on the same build write byte-identical artifacts.
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cfg = config_path("small_synthetic.toml");
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let r = openset_bin(&["experiment", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()])?;
        ensure(r.status.success(), || String::from_utf8_lossy(&r.stderr).into_owned())?;
        outputs.push(out);
    }
    let files = [
        "rep00/train_log.jsonl",
        "rep01/train_log.jsonl",
        "rep00/collective.json",
        "rep01/ovrn_max_baseline.json",
        "rep01/thresholds.json",
        "rep01/model.json",
        "summary.txt",
    ];
    for f in files {
        let read = |d: &Path| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"));
        ensure(read(&outputs[0])? == read(&outputs[1])?, || format!("{f} differs between invocations"))?;
    }
    Ok(format!(
        "{} repetitions equal across thread counts; {} artifacts byte-identical across processes",
        a.repetitions.len(),
        files.len()
    ))
}

fn tep_ingestion() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let spec = SyntheticSpec {
        known_classes: 3,
        unknown_classes: 1,
        variables: 52,
        run_length: 50,
        train_runs_per_class: 3,
        test_runs_per_class: 1,
        seed: 52,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).map_err(e2s)?;
    let names: Vec<String> = (1..=52).map(|j| if j <= 41 { format!("xmeas_{j}") } else { format!("xmv_{}", j - 41) }).collect();
    let (train_csv, test_csv) = (dir.path().join("tep_train.csv"), dir.path().join("tep_test.csv"));
    write_runs_csv(&train_csv, &data.train, &names).map_err(e2s)?;
    write_runs_csv(&test_csv, &data.test, &names).map_err(e2s)?;

    let out = dir.path().join("out");
    let config = format!(
        "name = \"tep-csv\"\nsource = \"csv\"\ntrain_csv = {:?}\ntest_csv = {:?}\nexpected_variables = 52\n\
         window = 20\nstride = 3\nchannels = [4, 8]\nmax_epochs = 2\nrepetitions = 1\noutput_dir = {:?}\n",
        train_csv.display().to_string(),
        test_csv.display().to_string(),
        out.display().to_string()
    );
    let cfg = dir.path().join("tep.toml");
    std::fs::write(&cfg, config).map_err(e2s)?;
    let r = openset_bin(&["experiment", "-c", cfg.to_str().unwrap()])?;
    ensure(r.status.success(), || String::from_utf8_lossy(&r.stderr).into_owned())?;
    ensure(out.join("experiment.json").is_file(), || "no experiment.json".into())?;
    let model = Model::load(out.join("rep00/model.json")).map_err(e2s)?;
    ensure(model.spec().variables == 52, || format!("model has {} variables", model.spec().variables))?;
    Ok(format!("{} train / {} test runs, 52 variables", data.train.len(), data.test.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient_suite", gradient_suite),
        ("score_identities", score_identities),
        ("calibration_coverage", calibration_coverage),
        ("windowing_counts", windowing_counts),
        ("determinism", determinism),
        ("tep_ingestion", tep_ingestion),
        ("desk_benchmark", desk_benchmark),
    ];
    let only: Option<Vec<String>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == name)) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
