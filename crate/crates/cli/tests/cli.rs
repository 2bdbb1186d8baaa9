use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dcl_cli::presets::train_preset;
use serde_json::Value;

fn dcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// The named preset shrunk to a few hundred steps.
fn quick_config(dir: &Path, name: &str, out: &str) -> String {
    let mut c = train_preset(name).unwrap();
    c.batch = 64;
    c.iterations = 150;
    c.eval_every = 50;
    c.eval_size = 512;
    c.out_dir = out.into();
    let path = dir.join(format!("{out}.cfg"));
    fs::write(&path, c.to_canonical()).unwrap();
    path.display().to_string()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "box-simple-beta1-nce", "run");
    let out = dcl(&["train", "--config", &cfg], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    let metrics: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for key in ["r2_mean", "mcc", "loss", "iterations"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
    assert_eq!(metrics["iterations"], 150);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("iter,loss,r2,mcc"));
    assert_eq!(history.lines().count(), 1 + 3);
    assert!(run.join("checkpoint").is_dir());
    let snapshot = fs::read_to_string(run.join("config.txt")).unwrap();
    assert_eq!(snapshot, fs::read_to_string(&cfg).unwrap());

    let out = dcl(&["eval", "run"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["mcc"], metrics["mcc"]);
    assert_eq!(eval["r2_mean"], metrics["r2_mean"]);
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = quick_config(tmp.path(), "hollow-ball-beta1-ince", "a");
    let b = quick_config(tmp.path(), "hollow-ball-beta1-ince", "b");
    for cfg in [&a, &b] {
        let out = dcl(&["train", "--config", cfg, "--seed", "7"], tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["metrics.json", "history.csv"] {
        let x = fs::read(tmp.path().join("a").join(file)).unwrap();
        let y = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
}

#[test]
fn config_errors_exit_2_with_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.cfg"), "space.n = 2\ntrain.loss = hinge\n").unwrap();
    let out = dcl(&["train", "--config", "bad.cfg"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.loss") && err.contains("line 2"), "{err}");

    let out = dcl(&["train", "--preset", "box-simple-beta1-hinge"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let out = dcl(&["train"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), "box-simple-beta1-nce", "unused");
    let out = dcl(
        &["sweep", "--config", &cfg, "--axis", "n", "--values", "2,4", "--losses", "nce,nwj", "--seeds", "0,1", "--out", "sw", "--threads", "2"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("loss,axis,value,seed,mcc,r2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r.split(',').count() == 6));
    assert!(rows[0].starts_with("nce,n,2,0,"));

    let out = dcl(&["sweep", "--config", &cfg, "--axis", "sigma", "--values", "--out", "empty"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = dcl(&["sweep", "--config", &cfg, "--axis", "n", "--out", "empty"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lemma1_suite_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dcl(&["oracle", "--suite", "lemma1", "--out", "o"], tmp.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("o/oracle-lemma1.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 20 * 5);
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn samplers_suite_is_calibrated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dcl(&["oracle", "--suite", "samplers", "--out", "o", "--seed", "3"], tmp.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert_eq!(stdout.lines().count(), 5 + 1);
}
