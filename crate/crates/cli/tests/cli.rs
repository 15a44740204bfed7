use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hicl_core::fixture::{default_planted, write_planted};

fn hicl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hicl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("error is JSON")
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_planted(dir.path(), &default_planted()).unwrap();
    dir
}

#[test]
fn build_index_then_warm_rerun() {
    let dir = fixture();
    let first = hicl(dir.path(), &["build-index", "--mock"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("120 new embeddings"));
    assert!(dir.path().join("out/index/vectors.bin").exists());
    assert!(dir.path().join("out/index/vectors.manifest").exists());

    let again = hicl(dir.path(), &["build-index", "--mock"]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("0 new embeddings"));
}

#[test]
fn missing_corpus_is_a_json_error() {
    let dir = fixture();
    fs::remove_file(dir.path().join("train.jsonl")).unwrap();
    let o = hicl(dir.path(), &["build-index", "--mock"]);
    assert!(!o.status.success());
    let e = error_json(&o);
    assert_eq!(e["error"], "store");
    assert!(e["message"].as_str().unwrap().contains("train.jsonl"));
}

#[test]
fn all_none_mock_has_none_rate_one() {
    let dir = fixture();
    let cfg = fs::read_to_string(dir.path().join("hicl.toml")).unwrap();
    fs::write(dir.path().join("none.toml"), cfg.replace("script.jsonl", "none_script.jsonl")).unwrap();
    assert!(hicl(dir.path(), &["build-index", "--config", "none.toml"]).status.success());
    let o = hicl(dir.path(), &["extract-hints", "--config", "none.toml"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("none-rate 1.000"));
    let hints = fs::read_to_string(dir.path().join("out/hints/hints.jsonl")).unwrap();
    assert_eq!(hints.lines().count(), 40);
}

#[test]
fn full_pipeline_and_replay() {
    let dir = fixture();
    for cmd in ["build-index", "extract-hints", "build-triplets", "train-her", "eval", "report"] {
        let o = hicl(dir.path(), &[cmd, "--mock", "--seed", "3"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let summary = fs::read_to_string(dir.path().join("out/report/summary.txt")).unwrap();
    assert!(summary.contains("hicl"));

    // report is pure
    let before = fs::read(dir.path().join("out/report/report.json")).unwrap();
    assert!(hicl(dir.path(), &["report", "--mock", "--seed", "3"]).status.success());
    assert_eq!(fs::read(dir.path().join("out/report/report.json")).unwrap(), before);

    // replayed hints match the live ones byte for byte
    let live = fs::read(dir.path().join("out/hints/hints.jsonl")).unwrap();
    for cmd in ["build-index", "extract-hints"] {
        let o = hicl(dir.path(), &[cmd, "--mock", "--seed", "3", "--out", "replayed", "--replay", "out/logs"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(dir.path().join("replayed/hints/hints.jsonl")).unwrap(), live);
}

#[test]
fn changed_seed_is_rejected_in_the_same_out_dir() {
    let dir = fixture();
    for cmd in ["build-index", "build-triplets"] {
        assert!(hicl(dir.path(), &[cmd, "--mock"]).status.success());
    }
    let o = hicl(dir.path(), &["build-triplets", "--mock", "--seed", "9"]);
    assert!(!o.status.success());
    assert_eq!(error_json(&o)["error"], "conflict");
}

#[test]
fn train_with_too_few_triplets_fails() {
    let dir = fixture();
    let cfg = fs::read_to_string(dir.path().join("hicl.toml")).unwrap();
    fs::write(dir.path().join("big.toml"), cfg.replace("batch_size = 16", "batch_size = 500")).unwrap();
    for cmd in ["build-index", "build-triplets"] {
        assert!(hicl(dir.path(), &[cmd, "--mock", "--config", "big.toml"]).status.success());
    }
    let o = hicl(dir.path(), &["train-her", "--mock", "--config", "big.toml"]);
    assert!(!o.status.success());
    let e = error_json(&o);
    assert_eq!(e["error"], "insufficient_data");
    assert!(e["message"].as_str().unwrap().contains("insufficient data"));
}
