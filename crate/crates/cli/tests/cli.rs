//! End-to-end tests of the `fedsim` binary: flag handling, exit codes,
//! report files, and the bundled scenario files staying in sync with the
//! built-in catalog.

use std::path::Path;
use std::process::{Command, Output};

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("scenario.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn small_config(dir: &Path) -> String {
    write_config(
        dir,
        r#"{
            "parties": 12,
            "fanout": 3,
            "rounds": 2,
            "model_dimension": 4,
            "behavior": {
                "think_time": { "kind": "uniform", "a": 0.5, "b": 6.0 },
                "dropout_prob": 0.0
            },
            "trigger": { "kind": "every_k_updates", "k": 3 },
            "seed": 9
        }"#,
    )
}

#[test]
fn print_defaults_emits_valid_config_json() {
    let out = fedsim(&["--print-defaults"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["parties"], 100);
    assert_eq!(value["unit_price_usd_per_container_second"], 0.0002692);
}

#[test]
fn missing_config_is_a_config_error() {
    let out = fedsim(&[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_field_reports_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"fanout": 1, "parties": 0}"#).unwrap();
    let out = fedsim(&["--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("fanout"), "stderr was: {err}");
    assert!(err.contains("parties"), "stderr was: {err}");
}

#[test]
fn unknown_key_reports_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    std::fs::write(&path, r#"{"partiez": 5}"#).unwrap();
    let out = fedsim(&["--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_summary_and_round_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("reports");
    let out = fedsim(&["--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("serverless-summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["rounds_completed"], 2);
    let csv = std::fs::read_to_string(out_dir.join("serverless-rounds.csv")).unwrap();
    assert!(csv.starts_with("round,latency_s,accepted,discarded,invocations,crashes,reconfigs"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn same_seed_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let mut bytes = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = fedsim(&[
            "--config",
            &config,
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        bytes.push((
            std::fs::read(out_dir.join("serverless-summary.json")).unwrap(),
            std::fs::read(out_dir.join("serverless-rounds.csv")).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn backend_override_and_csv_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("r");
    let out = fedsim(&[
        "--config",
        &config,
        "--backend",
        "centralized",
        "--format",
        "csv",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("round,latency_s"));
    assert!(out_dir.join("centralized-summary.json").exists());
}

#[test]
fn compare_emits_side_by_side_report() {
    let dir = tempfile::tempdir().unwrap();
    // 120 parties make the centralized latency visibly larger than the tree.
    let config = write_config(
        dir.path(),
        r#"{
            "parties": 120,
            "fanout": 10,
            "rounds": 1,
            "model_dimension": 4,
            "behavior": {
                "think_time": { "kind": "uniform", "a": 0.5, "b": 6.0 },
                "dropout_prob": 0.0
            },
            "trigger": { "kind": "every_k_updates", "k": 10 },
            "seed": 9
        }"#,
    );
    let out_dir = dir.path().join("cmp");
    let out = fedsim(&[
        "--config",
        &config,
        "--compare",
        "centralized,static_tree,serverless",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("comparison.json")).unwrap())
            .unwrap();
    let backends = report["backends"].as_array().unwrap();
    assert_eq!(backends.len(), 3);
    let latency = |label: &str| {
        backends.iter().find(|b| b["backend"] == label).unwrap()["mean_latency_seconds"]
            .as_f64()
            .unwrap()
    };
    assert!(latency("centralized") > latency("static_tree"));
    // Paired runs produce bitwise-identical final convergence summaries.
    let dist = |label: &str| {
        backends.iter().find(|b| b["backend"] == label).unwrap()["final_model_distance_to_optimum"]
            .as_f64()
            .unwrap()
    };
    assert!((dist("static_tree") - dist("serverless")).abs() < 1e-12);
    assert!(report["container_second_savings_percent"].is_number());
}

#[test]
fn compare_with_one_backend_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = fedsim(&["--config", &config, "--compare", "serverless"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failed_quorum_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
            "parties": 12,
            "fanout": 3,
            "rounds": 1,
            "model_dimension": 4,
            "behavior": {
                "think_time": { "kind": "constant", "c": 1.0 },
                "dropout_prob": 0.9
            },
            "round_policy": {
                "quorum_fraction": 1.0,
                "response_timeout_seconds": 20.0,
                "fail_on_no_quorum": true
            },
            "seed": 5
        }"#,
    );
    let out = fedsim(&["--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("quorum"), "stderr was: {err}");
}

#[test]
fn bundled_scenario_files_match_builtin_catalog() {
    // The files shipped under scenarios/ must stay in sync with the
    // programmatic catalog the CLI falls back to.
    let repo_scenarios = Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .join("scenarios");
    for name in fedsim_core::config::CANNED_SCENARIOS {
        let file = repo_scenarios.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&file)
            .unwrap_or_else(|_| panic!("missing bundled scenario {file:?}"));
        let expected = fedsim_core::config::canned_scenario(name)
            .unwrap()
            .to_pretty_json();
        assert_eq!(
            text, expected,
            "{name}.json is out of sync with the catalog"
        );
    }
}

#[test]
fn bundled_scenario_runs_by_name() {
    let dir = tempfile::tempdir().unwrap();
    // paper-joins is the cheapest bundled scenario (a single round).
    let out = fedsim(&[
        "--config",
        "paper-joins",
        "--backend",
        "serverless",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("serverless-summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["rounds_completed"], 1);
    assert_eq!(summary["rounds"][0]["accepted_updates"], 1200);
}
