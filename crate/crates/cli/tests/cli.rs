use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn sppo(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sppo"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn solve_exact_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let game = data("rock_paper_scissors.json");
    let o = sppo(dir.path(), &["solve-exact", game.to_str().unwrap(), "--t-max", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("gap_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
    let s = summary(dir.path());
    assert_eq!(s["ok"], true);
    assert!(s["results"]["min_regret_residual"].as_f64().unwrap() >= -1e-9);
}

#[test]
fn selfplay_is_reproducible_and_seed_sensitive() {
    let config = data("selfplay.json");
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = sppo(dir.path(), &["--seed", seed, "selfplay", config.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(dir.path().join("iterations.csv")).unwrap()
    };
    let a = run("5");
    assert_eq!(a, run("5"));
    assert_ne!(a, run("6"));
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn compare_table_is_antisymmetric() {
    let dir = tempfile::tempdir().unwrap();
    let config = data("selfplay.json");
    let o = sppo(
        dir.path(),
        &["compare", config.to_str().unwrap(), "--methods", "sppo,exact"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(dir.path());
    assert!(s["results"]["antisymmetry_error"].as_f64().unwrap() <= 1e-12);
    assert_eq!(s["results"]["labels"].as_array().unwrap().len(), 7);
}

#[test]
fn ablation_reports_each_k() {
    let dir = tempfile::tempdir().unwrap();
    let config = data("selfplay.json");
    let o = sppo(dir.path(), &["ablate-k", config.to_str().unwrap(), "--k", "1,6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(csv.starts_with("k,t,"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn partition_lab_and_token_mdp() {
    let dir = tempfile::tempdir().unwrap();
    let o = sppo(
        dir.path(),
        &["partition-lab", "--k-list", "10,50", "--eta", "0.5,2", "--seeds", "20"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("partition.csv")).unwrap();
    assert!(csv.starts_with("regime,K,eta,seed,statistic,value"));

    let spec = data("token_mdp.json");
    let o = sppo(dir.path(), &["token-mdp", spec.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(dir.path());
    assert!(s["results"]["value_identity_deviation"].as_f64().unwrap() < 1e-10);
}

#[test]
fn grad_check_passes_and_flags_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = sppo(dir.path(), &["grad-check", "--trials", "10"]);
    assert!(o.status.success());
    let o = sppo(dir.path(), &["grad-check", "--trials", "10", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(summary(dir.path())["ok"], false);
}

#[test]
fn bad_inputs_exit_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sppo(dir.path(), &["selfplay", "no-such-file.json"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"vocab": 10, "horizon": 7, "eta": 1.0, "pi_ref": "uniform", "reward": {"seed": 1}}"#).unwrap();
    let o = sppo(dir.path(), &["token-mdp", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cap"));
}
