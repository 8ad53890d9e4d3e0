use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrfusion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrfusion"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mrfusion(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn dataset(dir: &Path) {
    ok(dir, &["synth", "--classes", "3", "--objects", "3", "--size", "96", "--seed", "1", "--out", "ds"]);
    ok(dir, &["split", "--manifest", "ds/manifest.txt", "--ratio", "0.5", "--seed", "2", "--out", "split.txt"]);
}

fn train_args(out: &str) -> Vec<&str> {
    vec![
        "train", "--manifest", "ds/manifest.txt", "--split", "split.txt", "--model", "pan-only", "--epochs", "1",
        "--per-object", "2", "--out", out,
    ]
}

#[test]
fn help_shows_default_settings() {
    let dir = tempfile::tempdir().unwrap();
    let help = |verb: &str| String::from_utf8(mrfusion(dir.path(), &[verb, "--help"]).stdout).unwrap();
    assert!(help("train").contains("[default: 250]"));
    assert!(help("train").contains("[default: 0.0002]"));
    assert!(help("train").contains("[default: 32]"));
    assert!(help("split").contains("[default: 0.3]"));
    assert!(help("rf-fit").contains("[default: 400]"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mrfusion(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(mrfusion(dir.path(), &["split", "--manifest", "m", "--out", "o", "--bogus"]).status.code(), Some(2));
    assert_eq!(mrfusion(dir.path(), &["split", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = mrfusion(dir.path(), &["split", "--manifest", "missing.txt", "--out", "s.txt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: io: "), "{err}");

    dataset(dir.path());
    let mut args = train_args("m");
    args[6] = "nope";
    let err = String::from_utf8(mrfusion(dir.path(), &args).stderr).unwrap();
    assert_eq!(err.trim(), "error: config: unknown model kind 'nope'");
}

#[test]
fn full_pipeline_with_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    ok(dir, &train_args("m"));
    ok(dir, &["predict", "--checkpoint", "m/model.model", "--manifest", "ds/manifest.txt", "--stride", "16", "--out", "map.rast"]);
    ok(dir, &["evaluate", "--pred", "map.rast", "--truth", "ds/labels.rast", "--classes", "3", "--out", "ev"]);
    ok(dir, &[
        "extract-features", "--checkpoint", "m/model.model", "--manifest", "ds/manifest.txt", "--split", "split.txt",
        "--split-side", "test", "--per-object", "2", "--out", "f.csv",
    ]);
    ok(dir, &["rf-fit", "--features", "f.csv", "--trees", "10", "--out", "rf.bin"]);
    ok(dir, &["rf-predict", "--forest", "rf.bin", "--features", "f.csv", "--out", "rfp.csv"]);
    ok(dir, &["evaluate", "--pred", "rfp.csv", "--truth", "f.csv", "--classes", "3", "--out", "ev2"]);
    ok(dir, &[
        "rf-fit", "--manifest", "ds/manifest.txt", "--checkpoint", "m/model.model", "--split", "split.txt",
        "--trees", "5", "--per-object", "2", "--out", "rf2.bin",
    ]);

    let csv = fs::read_to_string(dir.join("f.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("label,f1,"));
    // The PAN-only network has 512 features.
    assert_eq!(header.split(',').count(), 513);
    let scores = fs::read_to_string(dir.join("ev/scores.csv")).unwrap();
    assert!(scores.starts_with("metric,value\naccuracy,"));

    let record = fs::read_to_string(dir.join("map.rast.run.txt")).unwrap();
    assert!(record.contains("args="));
    for name in ["model.mrfw", "pan.rast", "ms.rast", "map.rast"] {
        assert!(record.lines().any(|l| l.contains(".sha256 ") && l.ends_with(name)), "{name}\n{record}");
    }
    let train_record = fs::read_to_string(dir.join("m/run.txt")).unwrap();
    assert!(train_record.contains("seed.train=0"));
}

#[test]
fn same_seed_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    ok(dir, &train_args("a"));
    ok(dir, &train_args("b"));
    assert_eq!(fs::read(dir.join("a/model.mrfw")).unwrap(), fs::read(dir.join("b/model.mrfw")).unwrap());
    assert_eq!(fs::read(dir.join("a/model.model")).unwrap(), fs::read(dir.join("b/model.model")).unwrap());
}

#[test]
fn config_file_supplies_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--classes", "2", "--objects", "4", "--size", "64", "--out", "ds"]);
    fs::write(dir.join("cfg.txt"), "# split settings\nratio = 0.5\nseed = 9\n").unwrap();
    ok(dir, &["--config", "cfg.txt", "split", "--manifest", "ds/manifest.txt", "--out", "a.txt"]);
    let a = fs::read_to_string(dir.join("a.txt")).unwrap();
    assert!(a.contains("ratio=0.5") && a.contains("seed=9"), "{a}");
    ok(dir, &["--config", "cfg.txt", "split", "--manifest", "ds/manifest.txt", "--ratio", "0.25", "--out", "b.txt"]);
    assert!(fs::read_to_string(dir.join("b.txt")).unwrap().contains("ratio=0.25"));
}

#[test]
fn run_splits_writes_one_table_per_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--classes", "2", "--objects", "3", "--size", "96", "--no-fused", "--out", "ds"]);
    ok(dir, &[
        "--threads", "1", "run-splits", "--manifest", "ds/manifest.txt", "--n", "2", "--ratio", "0.5", "--models",
        "pan-only", "--epochs", "1", "--per-object", "2", "--no-augment", "--with-rf", "--trees", "5", "--out", "runs",
    ]);
    for name in ["pan-only.csv", "rf-pan-only.csv"] {
        let t = fs::read_to_string(dir.join("runs").join(name)).unwrap();
        assert_eq!(t.lines().count(), 5, "{t}");
    }
}
