//! End-to-end runs of the `flowse` binary on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

fn flowse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowse"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_data(dir: &Path) {
    let o = flowse(
        dir,
        &[
            "gen-data",
            "--set",
            "data.train=20",
            "--set",
            "data.valid=3",
            "--set",
            "data.test=3",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY_TRAIN: &[&str] = &[
    "--set",
    "train.epochs=2",
    "--set",
    "train.steps_per_epoch=5",
    "--set",
    "train.valid_clips=2",
    "--set",
    "model.hidden=16",
];

fn tiny_train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(TINY_TRAIN);
    args.extend_from_slice(extra);
    let o = flowse(dir, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec![],
        vec!["train", "--set", "train.learning_rate=1"],
        vec!["train", "--set", "no_equals_sign"],
        vec!["train", "--config", "missing.cfg"],
        vec!["verify", "--set", "verify.inject_fault=everything"],
        vec!["train", "--seed", "minus-one"],
    ] {
        assert_eq!(code(&flowse(dir.path(), &args)), 1, "{args:?}");
    }
    assert_eq!(code(&flowse(dir.path(), &["--help"])), 0);
}

#[test]
fn config_file_sections_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.cfg"),
        "[train]\nlr = 1e-3\nwidth = 3\n",
    )
    .unwrap();
    let o = flowse(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.width"));
}

#[test]
fn gen_data_counts_snrs_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let rows = csv_rows(&dir.path().join("data/train/manifest.csv"));
    assert_eq!(rows.len(), 20);
    for r in &rows {
        let snr: f64 = r[2].parse().unwrap();
        assert!((0.0..=20.0).contains(&snr));
        assert!(dir.path().join("data/train").join(&r[0]).is_file());
    }
    assert_eq!(
        csv_rows(&dir.path().join("data/test/manifest.csv")).len(),
        3
    );
    assert!(dir.path().join("data/config.resolved").is_file());

    let again = tempfile::tempdir().unwrap();
    tiny_data(again.path());
    let wav = "data/valid/noisy/valid_0002.wav";
    assert_eq!(
        std::fs::read(dir.path().join(wav)).unwrap(),
        std::fs::read(again.path().join(wav)).unwrap()
    );
    let other = tempfile::tempdir().unwrap();
    let o = flowse(
        other.path(),
        &[
            "gen-data",
            "--seed",
            "1",
            "--set",
            "data.train=1",
            "--set",
            "data.valid=0",
            "--set",
            "data.test=0",
        ],
    );
    assert_eq!(code(&o), 0);
    let first = "data/train/clean/train_0000.wav";
    assert_ne!(
        std::fs::read(dir.path().join(first)).unwrap(),
        std::fs::read(other.path().join(first)).unwrap()
    );
}

#[test]
fn train_enhance_and_bench_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    tiny_train(d, "cfm", &[]);
    for f in ["best.json", "last.json", "log.csv", "config.resolved"] {
        assert!(d.join("cfm").join(f).is_file(), "{f}");
    }
    let log = csv_rows(&d.join("cfm/log.csv"));
    assert_eq!(log.len(), 10);
    assert_eq!(log.iter().filter(|r| !r[3].is_empty()).count(), 2);
    let snapshot = std::fs::read_to_string(d.join("cfm/config.resolved")).unwrap();
    assert!(snapshot.contains("hidden = 16"));

    // The snapshot reproduces the run.
    let o = flowse(
        d,
        &["train", "--config", "cfm/config.resolved", "--out", "again"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(d.join("cfm/best.json")).unwrap(),
        std::fs::read(d.join("again/best.json")).unwrap()
    );

    let o = flowse(
        d,
        &[
            "enhance",
            "--set",
            "enhance.checkpoint=cfm/best.json",
            "--set",
            "enhance.input=data/test/manifest.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = csv_rows(&d.join("enhanced/metrics.csv"));
    assert_eq!(metrics.len(), 3);
    assert!(metrics
        .iter()
        .all(|r| r.len() == 6 && r[2].parse::<f64>().is_ok()));
    assert!(d.join("enhanced/wav/test_0000.wav").is_file());
    let snapshot = std::fs::read_to_string(d.join("enhanced/config.resolved")).unwrap();
    assert!(snapshot.contains("nfe = 5"));

    // A single file with an explicit sampler and NFE.
    let o = flowse(
        d,
        &[
            "enhance",
            "--out",
            "single",
            "--sampler",
            "pfode",
            "--nfe",
            "2",
            "--set",
            "enhance.checkpoint=cfm/best.json",
            "--set",
            "enhance.input=data/test/noisy/test_0001.wav",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&d.join("single/metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][2], "");

    let o = flowse(d, &["bench", "--set", "bench.checkpoint=cfm/best.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bench = csv_rows(&d.join("bench/bench.csv"));
    assert_eq!(bench.len(), 18);
    let samplers: std::collections::BTreeSet<_> = bench.iter().map(|r| r[0].clone()).collect();
    assert_eq!(samplers.len(), 3);
    assert!(bench.iter().all(|r| r[5] == "3"));
}

#[test]
fn crp_fine_tunes_a_dsm_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let o = flowse(d, &["train", "--set", "train.objective=crp"]);
    assert_eq!(code(&o), 1, "crp without an initial checkpoint");
    tiny_train(d, "dsm", &["--set", "train.objective=dsm"]);
    tiny_train(
        d,
        "crp",
        &[
            "--set",
            "train.objective=crp",
            "--set",
            "train.init=dsm/best.json",
        ],
    );
    let o = flowse(
        d,
        &[
            "train",
            "--out",
            "wrong",
            "--set",
            "train.objective=cfm",
            "--set",
            "train.init=dsm/best.json",
        ],
    );
    assert_ne!(code(&o), 0, "a score checkpoint cannot seed CFM training");
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = flowse(
        d,
        &[
            "enhance",
            "--set",
            "enhance.checkpoint=missing.json",
            "--set",
            "enhance.input=x.wav",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    // No dataset.
    assert_eq!(code(&flowse(d, &["train"])), 2);
    std::fs::write(d.join("junk.json"), "{").unwrap();
    let o = flowse(d, &["bench", "--set", "bench.checkpoint=junk.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes_and_reports_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowse(dir.path(), &["verify"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("tolerance") && !table.contains("FAIL"));
    assert!(dir.path().join("verify/verify.csv").is_file());

    let o = flowse(
        dir.path(),
        &["verify", "--set", "verify.inject_fault=field_sign"],
    );
    assert_eq!(code(&o), 3);
    let table = String::from_utf8_lossy(&o.stdout);
    let failing: Vec<&str> = table.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert!(
        failing
            .iter()
            .any(|l| l.contains("flow/field finite-difference consistency")),
        "{table}"
    );
}
