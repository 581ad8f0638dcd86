use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use moe_laplace::checkpoint::{load_model, load_posterior};
use moe_laplace::config::ExperimentConfig;
use moe_laplace::model::MoEModel;

const SMALL: &[&str] = &[
    "--set",
    "train.steps=60",
    "--set",
    "data.n_train=120",
    "--set",
    "data.n_val=60",
    "--set",
    "data.n_test=60",
    "--set",
    "data.n_ood=60",
    "--set",
    "mc.samples=64",
    "--set",
    "laplace.steps=50",
];

fn moe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe"))
        .arg("--out-dir")
        .arg(dir)
        .args(SMALL)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = moe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn prepared(seed: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--seed", seed]);
    ok(dir.path(), &["train", "--seed", seed]);
    dir
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn full_pipeline_writes_every_report() {
    let dir = prepared("3");
    let d = dir.path();
    ok(d, &["fit-laplace", "--seed", "3"]);
    let (_, post, extra) = load_posterior(&d.join("checkpoints/posterior.json")).unwrap();
    assert!(post.lambda() > 0.0);
    assert_eq!(extra["choice"]["method"], "evidence");

    let out = ok(d, &["evaluate", "--seed", "3"]);
    assert_eq!(out.lines().count(), 4);
    for f in [
        "test_map.json",
        "test_bayes.json",
        "ood_map.json",
        "ood_bayes.json",
        "reliability_test_bayes.csv",
        "predictions_ood.jsonl",
        "loss_curve.csv",
    ] {
        assert!(d.join("reports").join(f).exists(), "missing {f}");
    }
    let first = read(d.join("reports/ood_bayes.json"));
    ok(d, &["evaluate", "--seed", "3", "--split", "ood"]);
    assert_eq!(first, read(d.join("reports/ood_bayes.json")));

    ok(d, &["ablate", "--seed", "3"]);
    let rows: serde_json::Value = serde_json::from_slice(&read(d.join("reports/ablation_ood.json"))).unwrap();
    let labels: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["Q1", "Q2", "Q3", "Q4"]);
    let csv = read(d.join("reports/ablation_ood.csv"));
    ok(d, &["ablate", "--seed", "3", "--include-control"]);
    let rows: serde_json::Value = serde_json::from_slice(&read(d.join("reports/ablation_ood.json"))).unwrap();
    assert_eq!(rows[0]["label"], "control");
    // Quarter rows are reproducible and unaffected by the extra control run.
    let with_control = String::from_utf8(read(d.join("reports/ablation_ood.csv"))).unwrap();
    let without = String::from_utf8(csv).unwrap();
    let quarters = |s: &str| {
        s.lines()
            .filter(|l| l.starts_with('Q'))
            .map(str::to_owned)
            .collect::<Vec<_>>()
    };
    assert_eq!(quarters(&with_control), quarters(&without));
}

#[test]
fn data_and_checkpoints_are_byte_identical_on_rerun() {
    let a = prepared("5");
    let b = prepared("5");
    for f in [
        "data/train.jsonl",
        "data/ood.jsonl",
        "data/dataset.json",
        "checkpoints/model.bin",
        "checkpoints/model.json",
    ] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f} differs");
    }
}

#[test]
fn zero_steps_saves_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--seed", "6"]);
    ok(dir.path(), &["train", "--seed", "6", "--set", "train.steps=0"]);
    let (_, m) = load_model(&dir.path().join("checkpoints/model.json")).unwrap();
    let mut overrides: Vec<String> = SMALL.chunks(2).map(|c| c[1].to_string()).collect();
    overrides.push("train.steps=0".into());
    let cfg = ExperimentConfig {
        seed: 6,
        ..ExperimentConfig::default()
    }
    .with_overrides(&overrides)
    .unwrap()
    .resolved();
    assert_eq!(m.fingerprint(), MoEModel::init(cfg.model).unwrap().fingerprint());
}

#[test]
fn fixed_lambda_and_untreated_posterior() {
    let dir = prepared("7");
    let d = dir.path();
    ok(d, &["fit-laplace", "--seed", "7", "--lambda-fixed", "1.0"]);
    let (_, post, _) = load_posterior(&d.join("checkpoints/posterior.json")).unwrap();
    assert_eq!(post.lambda(), 1.0);

    ok(d, &["fit-laplace", "--seed", "7", "--treat", "none"]);
    let (_, post, _) = load_posterior(&d.join("checkpoints/posterior.json")).unwrap();
    assert!(post.treated().is_empty());
    ok(d, &["evaluate", "--seed", "7", "--split", "test"]);
    let dump = String::from_utf8(read(d.join("reports/predictions_test.jsonl"))).unwrap();
    for line in dump.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["probs_map"], row["probs_bayes"]);
    }

    let out = moe(d, &["fit-laplace", "--seed", "7", "--lpo", "--lambda-fixed", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failures_map_to_exit_codes() {
    let empty = tempfile::tempdir().unwrap();
    let out = moe(empty.path(), &["train", "--set", "train.nope=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.nope"));

    let out = moe(empty.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3));

    let dir = prepared("8");
    ok(dir.path(), &["fit-laplace", "--seed", "8"]);
    let out = moe(dir.path(), &["evaluate", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("provenance"));

    let out = moe(dir.path(), &["train", "--seed", "8", "--set", "train.lr=1e300"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(dir.path().join("checkpoints/model_partial.json").exists());
    load_model(&dir.path().join("checkpoints/model_partial.json")).unwrap();

    let out = Command::new(env!("CARGO_BIN_EXE_moe"))
        .env("MOE_NUM_THREADS", "0")
        .args(["gen-data", "--out-dir"])
        .arg(empty.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = prepared("10");
    let d = dir.path();
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_moe"))
            .env("MOE_NUM_THREADS", threads)
            .arg("--out-dir")
            .arg(d)
            .args(["fit-laplace", "--seed", "10"])
            .args(SMALL)
            .output()
            .unwrap();
        assert!(out.status.success());
        read(d.join("checkpoints/posterior.bin"))
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn smoke_reproduction_is_quick_and_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let t = Instant::now();
    ok(a.path(), &["repro", "--profile", "smoke", "--seeds", "0"]);
    assert!(t.elapsed().as_secs() < 120);
    ok(b.path(), &["repro", "--profile", "smoke", "--seeds", "0"]);
    for f in [
        "calibration_table.csv",
        "lambda_table.csv",
        "ablation_table.csv",
        "summary.json",
        "summary.md",
        "seed_0.json",
    ] {
        assert_eq!(
            read(a.path().join("reports").join(f)),
            read(b.path().join("reports").join(f)),
            "{f}"
        );
    }
}
