mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn agora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agora"))
        .args(args)
        .env_remove("AGORA_SCENARIO_DIR")
        .output()
        .unwrap()
}

fn scenario(name: &str) -> String {
    common::scenario_dir()
        .join(format!("{name}.json"))
        .display()
        .to_string()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn run_to(name: &str, dir: &Path) -> (Output, String) {
    let record = dir.join(format!("{name}.jsonl")).display().to_string();
    (agora(&["run", &scenario(name), "--out", &record]), record)
}

#[test]
fn run_exit_codes_follow_the_outcome() {
    let cases = [
        ("medical_cooperative", 0, "provisioned"),
        ("abandon_identification", 0, "abandoned"),
        ("all_reject", 2, "unresolvable"),
        ("medical_auction_all_fail", 2, "workflow_failed"),
    ];
    for (name, code, outcome) in cases {
        let out = agora(&["run", &scenario(name)]);
        assert_eq!(out.status.code(), Some(code), "{name}");
        let v = stdout_json(&out);
        assert_eq!(v["outcome"], outcome, "{name}");
        assert_eq!(v["log_hash"].as_str().unwrap().len(), 64);
    }
    let v = stdout_json(&agora(&["run", &scenario("medical_auction_all_fail")]));
    assert_eq!(v["task_id"], "t03");
}

#[test]
fn usage_and_parse_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "speling": true}"#).unwrap();
    let missing = dir.path().join("missing.json");
    let cases: Vec<Vec<String>> = vec![
        vec![],
        vec!["frobnicate".into()],
        vec!["run".into()],
        vec!["run".into(), bad.display().to_string()],
        vec!["run".into(), missing.display().to_string()],
        vec![
            "run".into(),
            scenario("medical_cooperative"),
            "--seed".into(),
            "x".into(),
        ],
        vec!["report".into(), missing.display().to_string()],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = agora(&args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
    }
}

#[test]
fn seed_override_changes_the_run_id() {
    let a = stdout_json(&agora(&["run", &scenario("lossy_network"), "--seed", "1"]));
    let b = stdout_json(&agora(&["run", &scenario("lossy_network"), "--seed", "2"]));
    let a2 = stdout_json(&agora(&["run", &scenario("lossy_network"), "--seed", "1"]));
    assert_ne!(a["run_id"], b["run_id"]);
    assert_eq!(a, a2);
}

#[test]
fn recorded_run_replays_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (out, record) = run_to("departure", dir.path());
    assert_eq!(out.status.code(), Some(0));
    let ran = stdout_json(&out);

    let dirs = common::scenario_dir().display().to_string();
    let out = agora(&["replay", &record, "--scenario-dir", &dirs]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = stdout_json(&out);
    assert_eq!(v["replay"], "ok");
    assert_eq!(v["log_hash"], ran["log_hash"]);

    let out = agora(&["report", &record]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["outcome"], "provisioned");
    assert_eq!(v["metrics"], ran["metrics"]);
    assert_eq!(v["metrics"]["reassignments"], 1);
}

#[test]
fn replay_finds_the_scenario_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (_, record) = run_to("referral", dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_agora"))
        .args(["replay", &record])
        .env("AGORA_SCENARIO_DIR", common::scenario_dir())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));

    // The temp dir holds no scenarios.
    let out = agora(&["replay", &record]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

#[test]
fn tampered_record_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let (_, record) = run_to("medical_competitive", dir.path());
    let text = std::fs::read_to_string(&record).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let edited = lines[20].replacen("\"tick\":", "\"tick\" :", 1);
    lines[20] = &edited;
    std::fs::write(&record, lines.join("\n") + "\n").unwrap();

    let dirs = common::scenario_dir().display().to_string();
    let out = agora(&["replay", &record, "--scenario-dir", &dirs]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at line 21"));
}

#[test]
fn report_rejects_an_unfinished_record() {
    let dir = tempfile::tempdir().unwrap();
    let (_, record) = run_to("medical_cooperative", dir.path());
    let text = std::fs::read_to_string(&record).unwrap();
    let head: Vec<&str> = text.lines().take(15).collect();
    // Torn final append.
    std::fs::write(&record, head.join("\n") + "\n{\"tick\":3,\"ev").unwrap();
    let out = agora(&["report", &record]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no terminal outcome"));
}
