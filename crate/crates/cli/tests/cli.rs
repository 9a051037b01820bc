//! Drives the `coperc` binary end to end.

use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn coperc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coperc")).args(args).output().unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_owned()
}

fn summary(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn error_line(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}

#[test]
fn usage_errors_exit_2() {
    let o = coperc(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["kind"], "usage");
    assert_eq!(coperc(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[round]\neps_c = 1.5\n").unwrap();
    let o = coperc(&["run", "--config", cfg.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_line(&o);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["key"], "round.eps_c");

    std::fs::write(&cfg, "[round]\nnot_a_key = 1\n").unwrap();
    let o = coperc(&["run", "--config", cfg.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("not_a_key"));
}

#[test]
fn failed_budget_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let args = ["budget", "--family", "occlusion", "--scenes-per-family", "2", "--budget-mbps", "0.000001", "--out", &out];
    let o = coperc(&args);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["kind"], "budget");
    assert_eq!(e["key"], "budget_mbps");
    assert!(dir.path().join("budget.json").exists());
}

#[test]
fn generate_run_log_replay_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let o = coperc(&["generate", "--family", "occlusion", "--scenes-per-family", "2", "--out", &out]);
    assert!(o.status.success());
    assert_eq!(summary(&o)["scenes"], 2);
    let scene = dir.path().join("scenes/occlusion_001.json");
    assert!(scene.exists());

    let live = dir.path().join("live");
    let log = dir.path().join("round.log");
    let o = coperc(&["run", "--scene", scene.to_str().unwrap(), "--log", log.to_str().unwrap(), "--out", &out_arg(&live)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let replayed = dir.path().join("replayed");
    let o = coperc(&["run", "--scene", scene.to_str().unwrap(), "--replay", log.to_str().unwrap(), "--out", &out_arg(&replayed)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let read = |d: &Path| serde_json::from_str::<Value>(&std::fs::read_to_string(d.join("trace.json")).unwrap()).unwrap();
    let (a, b) = (read(&live), read(&replayed));
    for key in ["ego_only", "intermediate", "final_detections", "truths"] {
        assert!(a.get(key).is_some(), "{key}");
        assert_eq!(a[key], b[key], "{key}");
    }
    let bytes = |t: &Value| t["links"].as_array().unwrap().iter().map(|l| l["bytes"].clone()).collect::<Vec<_>>();
    assert_eq!(bytes(&a), bytes(&b));

    let o = coperc(&["inspect", log.to_str().unwrap()]);
    assert!(o.status.success());
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3, "one demand, one feature and one detection payload");
}

#[test]
fn inspect_rejects_garbage_payload() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.hex");
    std::fs::write(&bad, "00112233").unwrap();
    let o = coperc(&["inspect", "--payload", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["kind"], "decode");
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: &str| {
        let out = dir.path().join(format!("w{workers}"));
        let args = ["sweep", "--family", "occlusion", "--family", "false_positive", "--scenes-per-family", "10", "--workers", workers, "--out", out.to_str().unwrap()];
        let o = coperc(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("sweep.csv")).unwrap()
    };
    let one = run("1");
    assert_eq!(one, run("8"));
    let header = String::from_utf8_lossy(&one).lines().next().unwrap().to_owned();
    assert!(header.starts_with("eps_c,late_fusion,ap50,ap70,mbps"), "{header}");
}

#[test]
fn suite_run_writes_traces_and_pr_curves() {
    let dir = tempfile::tempdir().unwrap();
    let o = coperc(&["run", "--family", "occlusion", "--scenes-per-family", "3", "--out", &out_arg(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(summary(&o)["rounds"], 3);
    let traces = std::fs::read_to_string(dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 3);
    for name in ["pr50.csv", "pr70.csv"] {
        let csv = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(csv.lines().next(), Some("threshold,precision,recall"));
        assert!(csv.lines().count() > 1);
    }
    assert!(dir.path().join("config.toml").exists());
}
