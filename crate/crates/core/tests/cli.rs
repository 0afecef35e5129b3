mod common;

use std::path::Path;
use std::process::{Command, Output};

fn m2a(args: &[&str], root_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_m2a"));
    cmd.args(args).env_remove("M2A_OUTPUT_ROOT");
    if let Some(root) = root_env {
        cmd.env("M2A_OUTPUT_ROOT", root);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{extra}\n{}", common::tiny_toml())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pretrain_then_repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let root = dir.path().join("out");
    ok(&m2a(&["pretrain", "--config", &cfg], Some(&root)));
    let sources: Vec<_> = std::fs::read_dir(root.join("source")).unwrap().collect();
    assert_eq!(sources.len(), 1);
    let cached = sources[0].as_ref().unwrap().path();
    for file in ["model.m2ap", "train.m2ad", "stream.m2ad", "source.toml", "pretrain.json"] {
        assert!(cached.join(file).exists(), "{file}");
    }

    let mut reports = Vec::new();
    for name in ["a", "b"] {
        ok(&m2a(&["run", "--config", &cfg, "--name", name, "--format", "json-lines"], Some(&root)));
        reports.push(std::fs::read(root.join("runs").join(format!("{name}.jsonl"))).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    // a fresh root retrains and still produces the same report
    let fresh = dir.path().join("fresh");
    ok(&m2a(&["run", "--config", &cfg, "--name", "a", "--format", "json-lines"], Some(&fresh)));
    assert_eq!(std::fs::read(fresh.join("runs/a.jsonl")).unwrap(), reports[0]);
}

#[test]
fn flags_override_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let root = dir.path().join("out");
    ok(&m2a(
        &["run", "--config", &cfg, "--method", "m2a-freq-all", "--loss-mode", "mcl", "--n", "4", "--alpha", "0.05", "--seed", "3"],
        Some(&root),
    ));
    let text = std::fs::read_to_string(root.join("runs/m2a-freq-all-seed3.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("m2a-freq-all,mcl,4,0.05,"), "{row}");
    assert!(root.join("runs/m2a-freq-all-seed3-batches.csv").exists());
}

#[test]
fn output_root_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let from_config = dir.path().join("from-config");
    let cfg = write_config(dir.path(), &format!("output_dir = {:?}", from_config.to_str().unwrap()));
    let from_env = dir.path().join("from-env");
    let from_flag = dir.path().join("from-flag");

    ok(&m2a(&["run", "--config", &cfg, "--name", "x"], None));
    assert!(from_config.join("runs/x.csv").exists());
    ok(&m2a(&["run", "--config", &cfg, "--name", "x"], Some(&from_env)));
    assert!(from_env.join("runs/x.csv").exists());
    ok(&m2a(
        &["--output-root", from_flag.to_str().unwrap(), "run", "--config", &cfg, "--name", "x"],
        Some(&from_env),
    ));
    assert!(from_flag.join("runs/x.csv").exists());
}

#[test]
fn export_converts_both_ways_without_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let root = dir.path().join("out");
    ok(&m2a(&["run", "--config", &cfg, "--name", "r"], Some(&root)));
    let csv = root.join("runs/r.csv");
    let jsonl = dir.path().join("r.jsonl");
    let back = dir.path().join("back.csv");
    ok(&m2a(&["export", "--input", csv.to_str().unwrap(), "--format", "jsonl", "--output", jsonl.to_str().unwrap()], None));
    ok(&m2a(&["export", "--input", jsonl.to_str().unwrap(), "--format", "csv", "--output", back.to_str().unwrap()], None));
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&back).unwrap());
}

#[test]
fn sweep_with_a_failed_arm_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "alpha = [0.1, 0.7]\nseed = [0, 1]\n").unwrap();
    let root = dir.path().join("out");
    let out = m2a(&["sweep", "--config", &cfg, "--grid", grid.to_str().unwrap(), "--name", "g"], Some(&root));
    assert_eq!(out.status.code(), Some(2));
    let rows = std::fs::read_to_string(root.join("sweeps/g.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    let failures = std::fs::read_to_string(root.join("sweeps/g-failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 2);
    assert!(failures.contains("invalid mask schedule"));

    std::fs::write(&grid, "loss_mode = [\"mcl+eml\", \"eml\"]\n").unwrap();
    ok(&m2a(&["sweep", "--config", &cfg, "--grid", grid.to_str().unwrap(), "--name", "h"], Some(&root)));
    assert!(!root.join("sweeps/h-failures.jsonl").exists());
}

#[test]
fn invalid_inputs_fail_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let root = dir.path().join("out");
    let out = m2a(&["run", "--config", &cfg, "--n", "20"], Some(&root));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid mask schedule"));
    assert!(!root.exists(), "nothing is written before validation");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n = \"three\"").unwrap();
    assert_eq!(m2a(&["run", "--config", bad.to_str().unwrap()], Some(&root)).status.code(), Some(1));
    assert_eq!(m2a(&["export", "--input", "missing.txt", "--format", "csv"], None).status.code(), Some(1));
    assert_ne!(m2a(&["run", "--method", "nope"], Some(&root)).status.code(), Some(0));
}
