use std::path::Path;
use std::process::{Command, Output};

fn ice_mlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ice-mlp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_evaluate_reproduces_the_fit_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let model = dir.path().join("model.json");
    let out = ice_mlp(&["generate", "--samples", "200", "--data-seed", "3", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let trained = stdout_json(&ice_mlp(&[
        "train",
        "--data",
        path(&data),
        "--estimator",
        "mle",
        "--topology",
        "11,4,3",
        "--max-iterations",
        "50",
        "--out",
        path(&model),
    ]));
    let evaluated = stdout_json(&ice_mlp(&["evaluate", "--data", path(&data), "--model", path(&model)]));
    let fit = trained["final_loss"].as_f64().unwrap();
    let ce = evaluated["cross_entropy"].as_f64().unwrap();
    assert!((fit - ce).abs() <= 1e-12, "{fit} vs {ce}");
    assert_eq!(evaluated["samples"], 200);
}

#[test]
fn ice_training_reports_a_larger_objective_than_its_cross_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let trained = stdout_json(&ice_mlp(&[
        "train",
        "--out",
        path(&model),
        "--samples",
        "150",
        "--data-seed",
        "1",
        "--topology",
        "11,3,3",
        "--max-iterations",
        "30",
    ]));
    let objective = trained["final_loss"].as_f64().unwrap();
    let ce = trained["fit_cross_entropy"].as_f64().unwrap();
    assert!(objective >= ce, "{objective} < {ce}");
}

#[test]
fn validate_passes_on_a_fresh_build() {
    let out = ice_mlp(&["validate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn experiment_output_is_repeatable() {
    let args = [
        "experiment",
        "--topologies",
        "11,3,3",
        "--sizes",
        "32,64",
        "--reps",
        "2",
        "--seed",
        "4",
        "--format",
        "csv",
    ];
    let a = ice_mlp(&args);
    let b = ice_mlp(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().lines().count(), 3);
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!ice_mlp(&["train", "--no-such-flag"]).status.success());
    assert!(!ice_mlp(&["frobnicate"]).status.success());
    assert!(!ice_mlp(&["train", "--topology", "11,0,3", "--samples", "50"]).status.success());
}

#[test]
fn missing_files_are_reported() {
    let out = ice_mlp(&["evaluate", "--model", "/nonexistent/model.json", "--samples", "10"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/model.json"));
}
