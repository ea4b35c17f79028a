use std::path::Path;
use std::process::{Command, Output};

use convoy_core::memory::{ExperiencePool, Outcome, TaskKind};
use convoy_core::trace::TRACE_COLUMNS;
use serde_json::Value;

fn convoy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convoy"))
        .args(args)
        .env_remove("CONVOY_LLM_ENDPOINT")
        .env_remove("CONVOY_LLM_MODEL")
        .output()
        .expect("binary runs")
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = convoy(&["run", "--scenario", "join", "--seed", "3", "--backend", "oracle", "--out", path_arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["scenario"], "join");
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["success"], true);
    for key in ["failure_reason", "avg_speed", "final_PE"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }

    let mut reader = csv::Reader::from_path(out.join("trace.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, TRACE_COLUMNS);
    let rows = convoy_core::trace::read_trace_csv(&out.join("trace.csv")).unwrap();
    assert!(rows.len() > 8);
    assert!(rows.iter().all(|r| r.v >= 0.0 && r.v <= 30.0));
}

#[test]
fn identical_invocations_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = convoy(&["run", "--scenario", "avoid", "--density", "30", "--seed", "7", "--out", path_arg(out)]);
        assert_eq!(o.status.code(), Some(0));
    }
    for file in ["trace.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn batch_writes_one_entry_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = convoy(&[
        "batch", "--scenario", "avoid", "--density", "20", "--seeds", "50", "--backend", "oracle", "--out",
        path_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = read_json(&dir.path().join("avoid/aggregate.json"));
    assert_eq!(agg["entries"].as_array().unwrap().len(), 50);
    assert_eq!(agg["runs"], 50);
    assert_eq!(agg["density"], 20);
    let rate = agg["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let csv_rows = csv::Reader::from_path(dir.path().join("avoid/aggregate.csv")).unwrap().records().count();
    assert_eq!(csv_rows, 50);
    for seed in [0, 49] {
        assert!(dir.path().join(format!("avoid/{seed}/trace.csv")).is_file());
        assert!(dir.path().join(format!("avoid/{seed}/summary.json")).is_file());
    }
}

#[test]
fn llm_backend_without_endpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = convoy(&["run", "--scenario", "avoid", "--backend", "llm_http", "--out", path_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CONVOY_LLM_ENDPOINT"));
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(convoy(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(convoy(&["run", "--out", "x"]).status.code(), Some(1));
    assert_eq!(convoy(&["run", "--scenario", "fly", "--out", "x"]).status.code(), Some(1));
    assert_eq!(convoy(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(convoy(&["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"kind": "leave", "seed": 11, "max_sim_time": 4.0, "highway": {"comm_range": 120.0}}"#)
        .unwrap();
    let out = dir.path().join("o");
    let o = convoy(&["run", "--config", path_arg(&config), "--seed", "2", "--dt", "0.05", "--out", path_arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["scenario"], "leave");
    assert_eq!(summary["seed"], 2);
    let rows = convoy_core::trace::read_trace_csv(&out.join("trace.csv")).unwrap();
    let last = rows.iter().map(|r| r.time).fold(0.0, f64::max);
    assert!(last <= 4.0 + 1e-9);
    assert!(rows.iter().any(|r| (r.time - 0.05).abs() < 1e-9), "dt flag ignored");

    std::fs::write(&config, "[1, 2]").unwrap();
    let o = convoy(&["run", "--config", path_arg(&config), "--out", path_arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn replay_reproduces_the_run_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = convoy(&["run", "--scenario", "escort", "--seed", "1", "--out", path_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let summary = read_json(&dir.path().join("summary.json"));
    let o = convoy(&["replay", path_arg(&dir.path().join("trace.csv"))]);
    assert_eq!(o.status.code(), Some(0));
    let stats: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["convoy_vehicles"], 8);
    let (a, b) = (stats["avg_speed"].as_f64().unwrap(), summary["avg_speed"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    let (a, b) = (stats["final_PE"].as_f64().unwrap(), summary["final_PE"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");

    let o = convoy(&["replay", path_arg(&dir.path().join("missing.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_pool_keeps_only_successful_experiences() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool/seed.jsonl");
    let o = convoy(&["seed-pool", "--seeds", "2", "--per-task", "25", "--out", path_arg(&path)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let pool = ExperiencePool::load(&path).unwrap();
    for task in TaskKind::ALL {
        let area = pool.area(task);
        assert!(!area.is_empty(), "{task:?} area is empty");
        assert!(area.len() <= 25);
        assert!(area.iter().all(|e| e.outcome == Outcome::Success && e.task == task));
    }
}

#[test]
fn shipped_config_matches_the_built_in_defaults() {
    use convoy_core::scenario::{ScenarioConfig, ScenarioKind};
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let shipped: ScenarioConfig = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let defaults = ScenarioConfig::new(ScenarioKind::AvoidObstacles, 0);
    assert_eq!(serde_json::to_value(shipped).unwrap(), serde_json::to_value(defaults).unwrap());
}
