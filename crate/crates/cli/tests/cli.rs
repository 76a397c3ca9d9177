use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gt"))
        .args(args)
        .env_remove("GT_LOG")
        .output()
        .expect("spawn gt")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--out", dir.to_str().unwrap(), "train"];
    args.extend_from_slice(extra);
    gt(&args)
}

#[test]
fn train_then_eval_diagnose_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let t = train(tmp.path(), &["--task", "modp", "--steps", "400"]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(String::from_utf8_lossy(&t.stderr).contains("# resolved config"));
    let s = json(&t);
    assert!(s["final_lm"].as_f64().unwrap() < s["initial_lm"].as_f64().unwrap());
    for f in ["checkpoint.json", "metrics.jsonl", "config.toml", "report.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let lines = fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 400);

    let e = gt(&["--out", out, "eval", "--task", "modp"]);
    assert!(e.status.success());
    assert_eq!(json(&e)["lm_loss"], s["final_lm"]);

    let d = gt(&["--out", out, "diagnose", "--task", "modp", "--bins", "8"]);
    assert!(d.status.success());
    for f in ["diagnostics.json", "utility_hist.csv", "entropy.csv", "ablation.csv", "calibration.csv"] {
        assert!(tmp.path().join("diagnostics").join(f).exists(), "{f}");
    }

    let a = gt(&["--out", out, "ablate", "--task", "modp", "--edge", "sem:num"]);
    assert!(a.status.success());
    assert!(json(&a)["mean_degradation"].as_f64().unwrap() > 0.0);

    let all = gt(&["--out", out, "ablate", "--task", "modp", "--edge", "all"]);
    assert_eq!(json(&all)["edges"].as_array().unwrap().len(), 5);

    let bad = gt(&["--out", out, "ablate", "--task", "modp", "--edge", "sem:ret"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        assert!(train(dir, &["--task", "dyck", "--steps", "50"]).status.success());
    }
    let args = ["--seed", "9", "--out", c.path().to_str().unwrap(), "train", "--task", "dyck", "--steps", "50"];
    assert!(gt(&args).status.success());
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "metrics.jsonl"), read(b.path(), "metrics.jsonl"));
    assert_eq!(read(a.path(), "checkpoint.json"), read(b.path(), "checkpoint.json"));
    assert_ne!(read(a.path(), "metrics.jsonl"), read(c.path(), "metrics.jsonl"));
}

#[test]
fn zero_steps_keeps_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(tmp.path(), &["--task", "retrieval", "--steps", "0"]);
    assert!(out.status.success());
    let s = json(&out);
    assert_eq!(s["initial_lm"], s["final_lm"]);
}

#[test]
fn config_file_is_read_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "task = \"dyck\"\n[train]\nsteps = 5\n").unwrap();
    let out = gt(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["task"], "dyck");

    fs::write(&cfg, "[model]\nlayers = 9\n").unwrap();
    let out = gt(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.layers"));

    fs::write(&cfg, "bogus_field = 1\n").unwrap();
    let out = gt(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gt(&["--out", tmp.path().to_str().unwrap(), "diagnose"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn verify_filters_and_reports_faults() {
    let ok = gt(&["verify", "--suite", "category"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).all(|l| l.contains(" category.")));

    let tmp = tempfile::tempdir().unwrap();
    let bad = gt(&["--out", tmp.path().to_str().unwrap(), "verify", "--suite", "geometry", "--fault", "gibbs-sign", "--json"]);
    assert_eq!(bad.status.code(), Some(1));
    let report = json(&bad);
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["gibbs-closed-form"]);
    assert!(tmp.path().join("verify.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(gt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gt(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(gt(&["verify", "--fault", "nope"]).status.code(), Some(2));
    assert_eq!(gt(&["ablate"]).status.code(), Some(2));
    assert_eq!(gt(&["--help"]).status.code(), Some(0));
}
