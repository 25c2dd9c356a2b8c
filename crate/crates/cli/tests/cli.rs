use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nsc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsc"))
        .current_dir(dir)
        .env_remove("NSC_SEED")
        .args(args)
        .output()
        .expect("nsc runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = nsc(dir, args);
    assert!(
        out.status.success(),
        "nsc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn failure(out: &Output) -> Value {
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("error is JSON");
    err["error"].clone()
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join(file)).unwrap()
}

/// Small balanced neuron dataset and a briefly trained network.
fn fixture(dir: &Path) {
    ok(dir, &["generate", "--model", "neuron", "--strategy", "balanced", "--n", "200", "--seed", "7", "--out-dir", "o", "--out", "train.csv"]);
    ok(dir, &["generate", "--model", "neuron", "--strategy", "uniform", "--n", "200", "--seed", "8", "--out-dir", "o", "--out", "test.csv"]);
    ok(dir, &["train", "--model", "neuron", "--data", "o/train.csv", "--epochs", "20", "--seed", "1", "--out-dir", "o", "--out", "net.json"]);
}

#[test]
fn generate_balanced_halves_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let s = ok(tmp.path(), &["generate", "--model", "neuron.json", "--strategy", "balanced", "--n", "200", "--seed", "7", "--out-dir", "o"]);
    assert_eq!(s["summary"]["positives"], 100);
    assert_eq!(s["summary"]["negatives"], 100);
    assert_eq!(s["seed"], 7);
    let path = s["outputs"][0].as_str().unwrap();
    let text = read(tmp.path(), path);
    let first = text.lines().next().unwrap();
    let hash = s["config_hash"].as_str().unwrap();
    assert_eq!(first, format!("# nsc generate config_hash={hash} seed=7"));
    let labels: Vec<&str> = text.lines().skip(2).map(|l| l.split(',').nth(8).unwrap()).collect();
    assert_eq!(labels.iter().filter(|l| **l == "1").count(), 100);
    assert_eq!(labels.len(), 200);
}

#[test]
fn seed_comes_from_flag_env_or_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("cfg.json"), r#"{"model": "pendulum", "seed": 3, "strategy": "uniform", "train_n": 50}"#).unwrap();
    ok(dir, &["generate", "--config", "cfg.json", "--seed", "5", "--out-dir", "a"]);
    let env = Command::new(env!("CARGO_BIN_EXE_nsc"))
        .current_dir(dir)
        .env("NSC_SEED", "5")
        .args(["generate", "--config", "cfg.json", "--out-dir", "a", "--out", "env.csv"])
        .output()
        .unwrap();
    assert!(env.status.success());
    let s = ok(dir, &["generate", "--config", "cfg.json", "--out-dir", "a", "--out", "cfg.csv"]);
    assert_eq!(s["seed"], 3);

    let body = |f: &str| read(dir, f).lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(body("a/pendulum_uniform_50.csv"), body("a/env.csv"));
    assert_ne!(body("a/env.csv"), body("a/cfg.csv"));
}

#[test]
fn worker_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = |jobs: &'static str, out: &'static str| {
        vec!["generate", "--model", "neuron", "--strategy", "balanced", "--n", "60", "--seed", "2", "--jobs", jobs, "--out", out]
    };
    ok(dir, &args("1", "one.csv"));
    ok(dir, &args("3", "three.csv"));
    let body = |f: &str| read(dir, &format!("out/{f}")).lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(body("one.csv"), body("three.csv"));
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    let args = ["eval", "--model", "neuron", "--classifier", "o/net.json", "--data", "o/test.csv", "--out-dir", "o"];
    ok(dir, &args);
    let first = read(dir, "o/eval.json");
    ok(dir, &args);
    assert_eq!(first, read(dir, "o/eval.json"));
    let report: Value = serde_json::from_str(&first).unwrap();
    let counts = &report["report"]["counts"];
    let n: u64 = ["tp", "tn", "fp", "fn"].iter().map(|k| counts[k].as_u64().unwrap()).sum();
    assert_eq!(n, 200);
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn certify_all_correct_stream_stops_at_closed_form_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    // a threshold of 0 predicts positive everywhere, so an all-positive
    // stream is classified correctly throughout
    let train = read(dir, "o/train.csv");
    let mut lines = train.lines().skip(1);
    let header = lines.next().unwrap();
    let positives: Vec<&str> = lines.filter(|l| l.split(',').nth(8) == Some("1")).collect();
    let mut stream = format!("{header}\n");
    for i in 0..2500 {
        stream.push_str(positives[i % positives.len()]);
        stream.push('\n');
    }
    std::fs::write(dir.join("stream.csv"), stream).unwrap();
    let s = ok(dir, &["certify", "--model", "neuron", "--classifier", "o/net.json", "--data", "stream.csv", "--theta", "0", "--out-dir", "o"]);
    assert_eq!(s["summary"]["decision"], "accept_h0");
    let m = s["summary"]["samples"].as_u64().unwrap();
    let closed = ((0.01f64 / 0.99).ln() / (0.996f64 / 0.998).ln()).ceil() as u64;
    assert_eq!(m, closed);

    let fnr = ok(dir, &["certify", "--model", "neuron", "--classifier", "o/net.json", "--data", "stream.csv", "--theta", "0", "--property", "fn-rate", "--out-dir", "o", "--out", "fn.json"]);
    assert_eq!(fnr["summary"]["decision"], "accept_h0");
    let report: Value = serde_json::from_str(&read(dir, "o/fn.json")).unwrap();
    assert_eq!(report["sprt"]["kind"], "rate-at-most");
}

#[test]
fn sweep_threshold_counts_are_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    ok(dir, &["sweep-threshold", "--model", "neuron", "--classifier", "o/net.json", "--data", "o/test.csv", "--points", "25", "--out-dir", "o"]);
    let csv = read(dir, "o/threshold_sweep.csv");
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 25);
    for w in rows.windows(2) {
        assert!(w[0][0] < w[1][0]);
        assert!(w[0][4] <= w[1][4], "FN count decreased");
        assert!(w[0][3] >= w[1][3], "FP count increased");
    }
    assert!(read(dir, "o/threshold_sweep.svg").contains("<polyline"));
}

#[test]
fn falsify_and_adapt_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    std::fs::write(dir.join("ga.json"), r#"{"ga": {"population": 16, "generations": 4}, "adapt": {"max_passes": 20}}"#).unwrap();
    let f = ok(dir, &["falsify", "--config", "ga.json", "--model", "neuron", "--classifier", "o/net.json", "--out-dir", "o"]);
    assert!(f["summary"]["oracle_calls"].as_u64().unwrap() > 0);
    let report: Value = serde_json::from_str(&read(dir, "o/falsify_fns.json")).unwrap();
    assert_eq!(report["stats"]["best"].as_array().unwrap().len(), 4);

    let a = ok(dir, &["adapt", "--config", "ga.json", "--model", "neuron", "--classifier", "o/net.json", "--train", "o/train.csv", "--test", "o/test.csv", "--max-iters", "2", "--out-dir", "o"]);
    assert!(a["summary"]["iterations"].as_u64().unwrap() <= 2);
    let trace = read(dir, "o/adapted.trace.csv");
    assert_eq!(trace.lines().nth(1).unwrap(), "iteration,fn_found,fp_found,passes,acc,fn_rate,fp_rate,train_size,violations");
    // the adapted network loads back for evaluation
    ok(dir, &["eval", "--model", "neuron", "--classifier", "o/adapted.json", "--data", "o/test.csv", "--out-dir", "o"]);
}

#[test]
fn sweep_arch_renders_a_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    std::fs::write(dir.join("cfg.json"), r#"{"train": {"lm": {"max_epochs": 5}}}"#).unwrap();
    let s = ok(dir, &["sweep-arch", "--config", "cfg.json", "--model", "neuron", "--train", "o/train.csv", "--test", "o/test.csv", "--layers", "1,2", "--neurons", "3,4", "--out-dir", "o"]);
    let acc = s["summary"]["accuracy"].as_array().unwrap();
    assert_eq!(acc.len(), 2);
    assert!(read(dir, "o/arch_sweep.csv").lines().nth(1).unwrap().starts_with("layers,3,4"));
    assert!(read(dir, "o/arch_sweep.svg").contains("hidden layers"));
}

#[test]
fn simulate_and_reverse_check() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let s = ok(dir, &["simulate", "--model", "neuron", "--x", "-60,5", "--horizon", "50", "--out-dir", "o"]);
    assert!(s["summary"]["jumps"].as_u64().unwrap() > 0);
    assert!(read(dir, "o/trajectory.csv").lines().nth(1).unwrap().starts_with("t,mode,v,u"));

    let r = ok(dir, &["simulate", "--model", "quadcopter", "--mode", "m2", "--x", "0,0,0,0,0,210,50", "--reverse", "--horizon", "1", "--policy", "random-walk", "--out-dir", "o"]);
    assert!(r["summary"]["status"]["blocked"].is_number());

    let c = ok(dir, &["reverse-check", "--model", "neuron", "--n", "5", "--out-dir", "o"]);
    assert_eq!(c["summary"]["checked"], 5);
    assert!(c["summary"]["worst"].as_f64().unwrap() < 1e-4);
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let missing = nsc(dir, &["eval", "--model", "neuron", "--classifier", "nope.json", "--data", "nope.csv"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(failure(&missing)["kind"], "config");

    let strategy = nsc(dir, &["generate", "--model", "neuron", "--strategy", "sideways", "--n", "4"]);
    let e = failure(&strategy);
    assert_eq!(e["kind"], "sampling");
    assert_eq!(e["command"], "generate");

    std::fs::write(dir.join("bad.json"), r#"{"seeed": 1}"#).unwrap();
    assert_eq!(failure(&nsc(dir, &["generate", "--config", "bad.json"]))["kind"], "config");

    let no_model = nsc(dir, &["generate", "--n", "4"]);
    assert_eq!(failure(&no_model)["kind"], "config");

    let usage = nsc(dir, &["train"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(failure(&usage)["kind"], "usage");

    let shape = nsc(dir, &["simulate", "--model", "neuron", "--x", "1,2,3"]);
    assert_eq!(failure(&shape)["kind"], "config");
}
