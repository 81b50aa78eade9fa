// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hydroqc"));
    c.env_remove("HYDROQC_OUTPUT_DIR").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn hydroqc")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_corpus(dir: &Path) -> PathBuf {
    let out = dir.to_str().unwrap();
    let o = run(&["fixtures", "--out", out, "--sites", "5", "--hours", "2400"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("hydroqc.toml")
}

#[test]
fn full_run_verifies_and_tampering_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_corpus(dir.path());
    let cfg = cfg.to_str().unwrap();
    let o = run(&["--config", cfg, "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(
        text.contains("verify: 7 report files recomputed and identical"),
        "{text}"
    );
    let summary = dir.path().join("out/report/summary.json");
    let mut bytes = fs::read(&summary).unwrap();
    bytes.extend_from_slice(b" ");
    fs::write(&summary, bytes).unwrap();
    let o = run(&["--config", cfg, "verify"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("summary.json"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifact_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_corpus(dir.path());
    let o = run(&["--config", cfg.to_str().unwrap(), "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("not found; run `hydroqc"), "{err}");
}

#[test]
fn seed_change_makes_artifacts_stale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_corpus(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(run(&["--config", cfg, "--seed", "1", "ingest"]).status.success());
    let o = run(&["--config", cfg, "--seed", "2", "qc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("different configuration; rerun `hydroqc ingest`"),
        "{}",
        stderr(&o)
    );
    assert!(run(&["--config", cfg, "--seed", "1", "qc"]).status.success());
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_corpus(dir.path());
    let target = dir.path().join("elsewhere");
    let o = bin()
        .args(["--config", cfg.to_str().unwrap(), "ingest"])
        .env("HYDROQC_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("ingest/sites.jsonl").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["--seed", "3", "--set", "seed=4", "config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("conflicts"), "{}", stderr(&o));
    let o = run(&["--set", "qc.no_such_field=1", "config"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run(&["--set", "qc.completeness_min=1.5", "config"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_prints_effective_values() {
    let o = run(&["--seed", "9", "--set", "windows.eval_stride=96", "config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("seed = 9"), "{text}");
    assert!(text.contains("eval_stride = 96"), "{text}");
}

#[test]
fn malformed_series_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_corpus(dir.path());
    let series = dir.path().join("series/SYN0001.csv");
    let text = fs::read_to_string(&series).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[4] = lines[4].replacen(":00:00Z", ":30:00Z", 1);
    fs::write(&series, lines.join("\n")).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "ingest"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("SYN0001.csv") && err.contains("line 5") && err.contains("not on the hour"),
        "{err}"
    );
}
