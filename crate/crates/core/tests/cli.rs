use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adherence"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).arg("--quiet").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

fn small_project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"seed": 8, "simulation": {"n_patients": 300}, "evaluation": {"folds": 3, "padding_ablation": false}}"#).unwrap();
    dir
}

fn all_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(all_files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_twice_is_byte_identical() {
    let dir = small_project();
    let d = dir.path();
    ok(d, &["simulate", "--config", "c.json", "--seed", "42", "--out", "a"]);
    ok(d, &["simulate", "--config", "c.json", "--seed", "42", "--out", "b"]);
    ok(d, &["simulate", "--config", "c.json", "--seed", "43", "--out", "c"]);
    let (a, b, c) = (all_files(&d.join("a")), all_files(&d.join("b")), all_files(&d.join("c")));
    assert_eq!(a.len(), 5);
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{x:?}");
        if x.file_name().unwrap() == "dispensing.csv" {
            assert_ne!(std::fs::read(x).unwrap(), std::fs::read(z).unwrap());
        }
    }
}

#[test]
fn unknown_config_keys_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"sed": 1, "phases": {"gap_rule": 2, "horizons": [90]}, "evaluation": {"models": {"mlp": {"hiden": 3}}}}"#).unwrap();
    let out = run(dir.path(), &["simulate", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"], "config");
    let details: Vec<&str> = e["details"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(details, ["sed", "phases.gap_rule", "evaluation.models.mlp.hiden"]);
    assert!(out.stdout.is_empty());
}

#[test]
fn invalid_values_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"simulation": {"n_patients": 0}, "evaluation": {"folds": 1, "horizons": [45]}}"#).unwrap();
    let out = run(dir.path(), &["simulate", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert!(e["details"].as_array().unwrap().len() >= 3, "{e}");
}

#[test]
fn usage_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["evaluate", "--model", "svm"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
    let out = run(dir.path(), &["train", "--horizon", "45"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["evaluate", "--features", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "features");
}

#[test]
fn stages_resume_from_files_and_stamp_provenance() {
    let dir = small_project();
    let d = dir.path();
    let c = ["--config", "c.json"];
    for stage in ["simulate", "phases", "features"] {
        ok(d, &[&[stage][..], &c].concat());
    }
    let printed = ok(d, &[&["evaluate"][..], &c].concat());
    assert!(printed.lines().any(|l| l.ends_with("report.csv")));
    let report = d.join("out/reports/report.csv");
    let rows = data_rows(&report);
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.len() == 8));

    ok(d, &[&["evaluate", "--model", "gbt", "--horizon", "180", "--out", "one"][..], &c].concat());
    assert_eq!(data_rows(&d.join("one/report.csv")).len(), 1);

    for f in all_files(d).into_iter().filter(|p| !p.ends_with("c.json")) {
        let text = std::fs::read_to_string(&f).unwrap();
        let first = text.lines().find(|l| !l.starts_with("<svg")).unwrap();
        assert!(first.contains("adherence 0.1.0") && first.contains("config=") && first.contains("seed=8"), "{f:?}: {first}");
    }
}

#[test]
fn train_then_score_new_claims() {
    let dir = small_project();
    let d = dir.path();
    let c = ["--config", "c.json"];
    for stage in ["simulate", "phases", "features"] {
        ok(d, &[&[stage][..], &c].concat());
    }
    ok(d, &[&["train", "--model", "gbt"][..], &c].concat());
    ok(d, &[&["train", "--model", "lstm", "--horizon", "90"][..], &c].concat());
    ok(d, &[&["train", "--model", "logistic", "--horizon", "360"][..], &c].concat());
    assert!(d.join("out/models/logistic_360_pvalues.csv").exists());
    let models = all_files(&d.join("out/models"));
    assert_eq!(models.len(), 6, "{models:?}");

    // new claims from a different seed
    ok(d, &[&["simulate", "--seed", "99", "--out", "new"][..], &c].concat());
    let phases = data_rows(&d.join("out/phases/phases.csv"));
    assert!(!phases.is_empty());

    ok(d, &[&["score", "--model", "out/models/gbt_180.model", "--claims", "new", "--out", "s_gbt"][..], &c].concat());
    let gbt = data_rows(&d.join("s_gbt/scores.csv"));
    ok(d, &[&["score", "--model", "out/models/lstm_90.model", "--claims", "new", "--out", "s_lstm"][..], &c].concat());
    let lstm = data_rows(&d.join("s_lstm/scores.csv"));
    assert!(!gbt.is_empty() && lstm.len() > gbt.len());
    for r in gbt.iter().chain(&lstm) {
        let risk: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&risk));
    }
    assert!(gbt.iter().all(|r| r[3].is_empty()));
    assert!(lstm.iter().all(|r| !r[3].is_empty()));

    let out = run(d, &["score", "--model", "out/models/nope.model", "--claims", "new"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "learner");
}

#[test]
fn oracle_check_reports_json() {
    let dir = small_project();
    let d = dir.path();
    ok(d, &["simulate", "--config", "c.json"]);
    let out = ok(d, &["oracle-check", "--config", "c.json"]);
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["mismatches"].as_array().unwrap().len(), 0);
    assert_eq!(report["matching_rows"], report["pipeline_phases"]);
}

#[test]
fn help_lists_subcommands() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for s in ["simulate", "phases", "features", "train", "evaluate", "score", "oracle-check"] {
        assert!(text.contains(s), "{s}");
    }
}
