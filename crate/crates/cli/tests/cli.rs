use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcolab::config::ExperimentConfig;

fn pcolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcolab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pcolab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A reduced config writing into `dir`.
fn small_config(dir: &Path, precision: &str) -> PathBuf {
    let mut c = ExperimentConfig::toy();
    c.corpus.n_sentences = 200;
    c.data.sft = 200;
    c.data.pair_prompts = 16;
    c.data.unlabeled_prompts = 8;
    c.data.eval = 8;
    c.sft.steps = 40;
    c.pref.steps = 5;
    c.paths.out_dir = dir.join("out");
    c.precision = serde_json::from_value(serde_json::json!(precision)).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, c.to_json()).unwrap();
    path
}

fn record(dir: &Path, name: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("out/reports").join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn corpus_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), "f32");
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "gen-corpus"]);
    let first = std::fs::read(d.path().join("out/corpus.txt")).unwrap();
    ok(&["--config", c, "gen-corpus"]);
    assert_eq!(first, std::fs::read(d.path().join("out/corpus.txt")).unwrap());
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 200);
    let rec = record(d.path(), "gen-corpus.json");
    assert!(rec["details"]["repeat_at_3_per_sentence"].as_f64().unwrap() < 0.05);
}

#[test]
fn pipeline_runs_and_records_match_the_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), "f32");
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "gen-corpus"]);
    ok(&["--config", c, "sft"]);
    ok(&["--config", c, "make-pairs"]);
    ok(&["--config", c, "train", "--loss", "pairwise-cringe"]);
    let ckpt = d.path().join("out/train_pairwise-cringe.ckpt");
    ok(&["--config", c, "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    ok(&["--config", c, "eval"]);
    let sft_eval = record(d.path(), "eval-sft.json");
    assert_eq!(sft_eval["rows"][0]["win_rate"].as_f64(), Some(0.5));
    let effective = ExperimentConfig::load(&d.path().join("out/config.json")).unwrap();
    for name in ["gen-corpus.json", "sft.json", "make-pairs.json", "train-pairwise-cringe.json", "eval-sft.json"] {
        let r = record(d.path(), name);
        assert_eq!(r["config_hash"].as_str(), Some(effective.hash().as_str()), "{name}");
        assert!(r["wall_time_secs"].as_f64().unwrap() >= 0.0);
    }
    let table = ok(&["--config", c, "report"]);
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn f64_runs_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), "f64");
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "gen-corpus"]);
    ok(&["--config", c, "sft"]);
    let first = std::fs::read(d.path().join("out/sft.ckpt")).unwrap();
    ok(&["--config", c, "sft"]);
    assert_eq!(first, std::fs::read(d.path().join("out/sft.ckpt")).unwrap());
}

#[test]
fn missing_prerequisite_is_named() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), "f32");
    let out = pcolab(&["--config", cfg.to_str().unwrap(), "train", "--loss", "dpo"]);
    assert_eq!(out.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("vocab.txt"));
}

#[test]
fn invalid_config_reports_fields() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("bad.json");
    let mut c = ExperimentConfig::toy();
    c.loss.tau = -1.0;
    c.lm.d_model = 7;
    std::fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
    let out = pcolab(&["--config", path.to_str().unwrap(), "sft"]);
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("tau") && msg.contains("d_model"), "{msg}");
    std::fs::write(&path, r#"{"schema_version": 1, "sede": 4}"#).unwrap();
    let out = pcolab(&["--config", path.to_str().unwrap(), "sft"]);
    assert_eq!(out.status.code(), Some(3));
}

fn write_record(path: &Path, rows: serde_json::Value) {
    let r = serde_json::json!({
        "schema_version": 1,
        "command": "eval",
        "config_hash": "x",
        "seed": 0,
        "wall_time_secs": 1.0,
        "outputs": {},
        "rows": rows,
        "details": null,
    });
    std::fs::write(path, r.to_string()).unwrap();
}

#[test]
fn report_sorts_and_skips_bad_records() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a.json");
    let b = d.path().join("b.json");
    let bad = d.path().join("bad.json");
    write_record(&a, serde_json::json!([{"name": "zeta", "iteration": 1, "win_rate": 0.625, "repeat_at_n": 1.5, "f1": 0.25}]));
    write_record(&b, serde_json::json!([
        {"name": "alpha", "iteration": 2, "win_rate": 0.625, "repeat_at_n": 0.5, "f1": 0.5},
        {"name": "best", "iteration": null, "win_rate": 0.875, "repeat_at_n": 0.0, "f1": 0.75}
    ]));
    std::fs::write(&bad, r#"{"schema_version": 9}"#).unwrap();
    let paths: Vec<&str> = [&a, &b, &bad].iter().map(|p| p.to_str().unwrap()).collect();
    let svg = d.path().join("chart.svg");
    let mut args = vec!["report", "--svg", svg.to_str().unwrap()];
    args.extend(&paths);
    let table = ok(&args);
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["best", "alpha", "zeta"]);
    assert!(table.contains("0.6250") && table.contains("1.5000"));
    assert_eq!(std::fs::read_to_string(&svg).unwrap().matches("<rect").count(), 3);
    assert_eq!(ok(&["report", paths[0]]).lines().count(), 2);
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["--out", d.path().to_str().unwrap(), "gradcheck"]);
    assert_eq!(out.lines().filter(|l| l.contains("PASS")).count(), 6);
}
