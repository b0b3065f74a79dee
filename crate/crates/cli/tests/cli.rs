use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rmmdp::explore::MomentFile;
use rmmdp::fit::FitResult;
use rmmdp::io::{load_model, model_to_json, read_json, to_canonical_json};
use serde::Deserialize;

fn rmmdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmmdp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[derive(Debug, Deserialize)]
struct Metrics {
    #[serde(rename = "K")]
    k: u64,
    suboptimality: f64,
    fit_feasible: bool,
    wall_ms: u64,
}

fn metrics(path: &Path) -> Metrics {
    let mut r = csv::Reader::from_path(path).unwrap();
    let rows: Vec<Metrics> = r.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    rows.into_iter().next().unwrap()
}

const E1: &str = r#"{"model": {"example": {"name": "e1", "horizon": 2}}, "contexts": 2, "max_episodes": 20000}"#;

#[test]
fn em2_on_e1_is_near_optimal_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "e1.json", E1);
    let a = rmmdp(dir.path(), &["--config", "e1.json", "--seed", "7", "--out", "a", "em2"]);
    assert!(matches!(code(&a), 0 | 2), "{}", String::from_utf8_lossy(&a.stderr));
    let m = metrics(&dir.path().join("a/metrics.csv"));
    assert!(m.suboptimality <= 0.1, "{m:?}");
    assert!(m.fit_feasible);
    assert_eq!((m.k, m.wall_ms), (20000, 0));
    for f in ["moments.json", "fitted_model.json", "policy.json", "fit.json", "explore.csv"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let b = rmmdp(dir.path(), &["--config", "e1.json", "--seed", "7", "--out", "b", "em2"]);
    assert_eq!(code(&a), code(&b));
    for f in ["metrics.csv", "moments.json", "fitted_model.json", "policy.json", "explore.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn single_context_truth_is_learned() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "m1.json",
        r#"{"model": {"random": {"spec": {"states": 2, "actions": 2, "support": 2, "horizon": 3, "contexts": 1}, "seed": 5}},
            "contexts": 1, "max_episodes": 5000}"#,
    );
    let o = rmmdp(dir.path(), &["--config", "m1.json", "--out", "run", "em2"]);
    assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
    let m = metrics(&dir.path().join("run/metrics.csv"));
    assert!(m.suboptimality <= 0.1, "{m:?}");
}

#[test]
fn artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "e1.json", E1);
    let o = rmmdp(dir.path(), &["--config", "e1.json", "--out", "run", "em2", "--max-episodes", "2000"]);
    assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");

    let text = fs::read_to_string(run.join("fitted_model.json")).unwrap();
    assert_eq!(model_to_json(&load_model(run.join("fitted_model.json")).unwrap()).unwrap(), text);

    let text = fs::read_to_string(run.join("moments.json")).unwrap();
    let file: MomentFile = read_json(run.join("moments.json")).unwrap();
    assert_eq!(to_canonical_json(&file).unwrap(), text);
    // and through the in-memory table
    let table = file.table().unwrap();
    assert_eq!(table.len(), file.entries.len());

    #[derive(Deserialize, serde::Serialize)]
    struct FitFile {
        retried: bool,
        result: FitResult,
    }
    let text = fs::read_to_string(run.join("fit.json")).unwrap();
    let fit: FitFile = read_json(run.join("fit.json")).unwrap();
    assert_eq!(to_canonical_json(&fit).unwrap(), text);

    let text = fs::read_to_string(run.join("policy.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(to_canonical_json(&v).unwrap(), text);
}

#[test]
fn invalid_model_exits_one_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "bad.json",
        r#"{"format": "rmmdp/1", "states": 1, "actions": 1, "horizon": 1, "contexts": 1, "support": [0, 1],
            "transition": [1], "init": [1], "weights": [1], "rewards": [0.7, 0.4]}"#,
    );
    let o = rmmdp(dir.path(), &["validate", "--model", "bad.json"]);
    assert_eq!(code(&o), 1);
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("invalid"));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["valid"], false);

    let o = rmmdp(dir.path(), &["plan", "--model", "missing.json"]);
    assert_eq!(code(&o), 1);
    assert!(serde_json::from_slice::<serde_json::Value>(&o.stderr).is_ok());
}

#[test]
fn explore_budget_and_infeasible_fit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "e1.json", E1);
    let o = rmmdp(dir.path(), &["--config", "e1.json", "--out", "ex", "explore", "--max-episodes", "3000"]);
    assert_eq!(code(&o), 2);
    let o = rmmdp(dir.path(), &["--out", "fit", "fit", "--moments", "ex/moments.json", "--contexts", "1", "--slack-scale", "0", "--restarts", "4"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = rmmdp(dir.path(), &["--out", "fit2", "fit", "--moments", "ex/moments.json", "--contexts", "2", "--restarts", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("fit2/fitted_model.json").exists());
    let o = rmmdp(dir.path(), &["explore", "--model", "fit2/fitted_model.json"]);
    assert_eq!(code(&o), 1, "--out is required");
}

#[test]
fn hardgen_reference_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmmdp(dir.path(), &["--out", "hg", "hardgen", "--epsilon", "0.09", "--correct", "1,0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("hg/hardgen.json")).unwrap()).unwrap();
    assert!((side["value"]["v_star"].as_f64().unwrap() - 1.09).abs() < 1e-9);
    assert!((side["value"]["uniform_value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let model = load_model(dir.path().join("hg/model.json")).unwrap();
    assert_eq!(model.num_states(), 3);

    let o = rmmdp(dir.path(), &["--out", "bad", "hardgen", "--degree", "3"]);
    assert_eq!(code(&o), 1);

    let o = rmmdp(dir.path(), &["analyze", "kl", "--model1", "hg/model.json", "--model2", "hg/model.json", "--episodes", "2"]);
    assert_eq!(code(&o), 0);
    let kl: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(kl["lhs"].as_f64(), Some(0.0));
}

#[test]
fn simulate_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "e1.json", E1);
    let o = rmmdp(dir.path(), &["--config", "e1.json", "--seed", "3", "simulate", "--episodes", "4"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    let o2 = rmmdp(dir.path(), &["--config", "e1.json", "--seed", "3", "simulate", "--episodes", "4"]);
    assert_eq!(String::from_utf8(o2.stdout).unwrap(), text);

    let o = rmmdp(dir.path(), &["--config", "e1.json", "--out", "ex", "explore", "--max-episodes", "2000"]);
    assert_eq!(code(&o), 2);
    let o = rmmdp(dir.path(), &["--config", "e1.json", "--out", "p", "plan"]);
    assert_eq!(code(&o), 0);
    let o = rmmdp(dir.path(), &["analyze", "levels", "--moments", "ex/moments.json"]);
    assert_eq!(code(&o), 0);
    let lv: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let t = lv["thresholds"].as_array().unwrap();
    assert_eq!(t[0].as_f64(), Some(500.0));
    let o = rmmdp(dir.path(), &["--out", "fit", "fit", "--moments", "ex/moments.json", "--restarts", "8"]);
    assert_eq!(code(&o), 0);
    let o = rmmdp(dir.path(), &["analyze", "tv", "--model1", "fit/fitted_model.json", "--model2", "fit/fitted_model.json", "--moments", "ex/moments.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tv: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(tv["violations"], 0);
}
