use std::path::Path;
use std::process::{Command, Output};

use subspace_gmm::estimator::SubspaceEstimate;
use subspace_gmm::harness::emit::{read_json, read_summary_csv};
use subspace_gmm::models::load_csv;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subspace-gmm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_estimate_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mix.csv");
    let est = dir.path().join("est.json");
    ok(&["simulate", "--model", "mixed-linear", "--n", "2000", "--p", "6", "--seed", "4", "--out", s(&data)]);
    let loaded = load_csv(&data, Some("y")).unwrap();
    assert_eq!((loaded.n(), loaded.p()), (2000, 6));

    ok(&["estimate", "--data", s(&data), "--response", "y", "--preset", "mixture", "--groups", "a,b", "--r", "2", "--out", s(&est)]);
    let estimate = SubspaceEstimate::from_json(&std::fs::read_to_string(&est).unwrap()).unwrap();
    assert_eq!((estimate.p(), estimate.r), (6, 2));

    let r2: f64 = ok(&["r2", "--data", s(&data), "--estimate", s(&est), "--degree", "2"]).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&r2));
}

#[test]
fn rank_prints_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("factor.csv");
    ok(&["simulate", "--model", "factor", "--n", "1000", "--p", "6", "--sigma", "1", "--seed", "2", "--out", s(&data)]);
    let out = cli(&["rank", "--data", s(&data), "--preset", "factor", "--noise-sigma", "1"]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().next().unwrap(), "k,lambda_k,stat_k,eta_k");
    assert_eq!(table.lines().count(), 1 + 7);
    assert!(String::from_utf8(out.stderr).unwrap().contains("r_tau=2"));
}

#[test]
fn experiment_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let csv_dir = dir.path().join("csv");
    let json = dir.path().join("res.json");
    let base = ["experiment", "--name", "dimest", "--seed", "7", "--replicates", "2"];
    ok(&[&base[..], &["--out", s(&csv_dir)]].concat());
    ok(&[&base[..], &["--format", "json", "--out", s(&json)]].concat());
    let summary = read_summary_csv(csv_dir.join("summary.csv")).unwrap();
    let doc = read_json(&json).unwrap();
    assert_eq!(summary, doc.summary);
    assert_eq!(doc.config.seed, 7);
    assert_eq!(doc.rows.len(), 2 * 2);
}

#[test]
fn experiment_requires_a_seed_and_known_methods() {
    assert!(!cli(&["experiment", "--name", "example1", "--out", "/dev/null"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"name":"custom","model":{"kind":"factor","p":4,"r":1,"mu":1,"sigma":1},"n":50,"methods":["gmm-wat"],"seed":1}"#,
    )
    .unwrap();
    let out = cli(&["experiment", "--config", s(&cfg), "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("gmm-wat"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn distributed_and_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let shards = dir.path().join("shards");
    std::fs::create_dir(&shards).unwrap();
    for (i, n) in [300, 500, 400].iter().enumerate() {
        let path = shards.join(format!("part{i}.csv"));
        ok(&["simulate", "--model", "factor", "--n", &n.to_string(), "--p", "5", "--seed", &(10 + i).to_string(), "--out", s(&path)]);
    }
    let est = ok(&["distributed", "--shards", s(&shards), "--preset", "factor", "--r", "2"]);
    assert_eq!(SubspaceEstimate::from_json(&est).unwrap().r, 2);

    let table = ok(&[
        "bootstrap", "--data", s(&shards.join("part1.csv")), "--preset", "factor", "--r", "2", "--resamples", "5", "--seed", "3",
    ]);
    assert_eq!(table.lines().count(), 6);
}
