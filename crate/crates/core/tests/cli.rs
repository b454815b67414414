//! The `offload-sim` binary: exit codes, usage errors and reproducible output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_offload-sim"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn met_slos_exit_zero() {
    let s = scenario("tp1-single.json");
    let o = run(&["simulate", "--scenario", s.to_str().unwrap(), "--policy", "select-n"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["requests"][0]["verdict"], "met");
}

#[test]
fn a_violated_slo_exits_one() {
    let s = scenario("tp1-single.json");
    let o = run(&["simulate", "--scenario", s.to_str().unwrap(), "--policy", "deepspeed"]);
    assert_eq!(code(&o), 1);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["requests"][0]["verdict"], "violated");
}

#[test]
fn a_rejected_request_is_not_a_violation() {
    let s = scenario("fig2b-deepspeed.json");
    let o = run(&["coordinate", "--scenario", s.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["requests"][0]["verdict"], "rejected");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let profile = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/profiles/tp1.json");
    let out = dir.path().join("r.json");
    let empty = run(&[
        "analyze",
        "--profile",
        profile.to_str().unwrap(),
        "--slo",
        "20",
        "--seq",
        "64",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&empty), 2);
    assert!(!out.exists());
    let missing = run(&["simulate", "--scenario", "/nonexistent.json"]);
    assert_eq!(code(&missing), 2);
    let s = scenario("tp1-single.json");
    let policy = run(&["simulate", "--scenario", s.to_str().unwrap(), "--policy", "fastest"]);
    assert_eq!(code(&policy), 2);
}

#[test]
fn analyze_writes_the_single_entry_record() {
    let dir = tempfile::tempdir().unwrap();
    let profile = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/profiles/tp1.json");
    let out = dir.path().join("r.json");
    let o = run(&[
        "analyze",
        "--profile",
        profile.to_str().unwrap(),
        "--slo",
        "20",
        "--batch",
        "8",
        "--seq",
        "64",
        "--phase",
        "decode",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rec = offload_core::analyzer::record_from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rec.entries.len(), 1);
    assert_eq!(rec.entries.values().next().unwrap(), &offload_core::RecordEntry::Interval(3));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("tp1-pair.json");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let trace = dir.path().join(format!("t{k}.json"));
        let o = run(&[
            "simulate",
            "--scenario",
            s.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
        ]);
        let c = run(&["compare", "--scenario", s.to_str().unwrap()]);
        outputs.push((o.stdout, std::fs::read(&trace).unwrap(), c.stdout));
    }
    assert!(!outputs[0].0.is_empty() && !outputs[0].1.is_empty());
    assert_eq!(outputs[0], outputs[1]);
}
