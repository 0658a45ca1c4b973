use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lagrange_units::io::{self, Checkpoint};
use lagrange_units::{verify, ConstraintSet, DualModel, SigmoidFamily};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

const SMALL: &str = "\
[data]
n_samples = 300
[base]
epochs = 200
[constrained]
epochs = 4
[seeds]
runs = [1, 2]
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lagrange-units"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn trained(dir: &Path) -> PathBuf {
    write(dir, "c.toml", SMALL);
    let out = run(&["train-base", "--config", "c.toml", "--out", "o"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("o")
}

#[test]
fn help_documents_commands_and_exit_codes() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["train-base", "train-constrained", "solve", "verify", "aggregate", "Exit codes", "LAGRANGE_UNITS_THREADS"] {
        assert!(text.contains(word), "{word}");
    }
    for c in 0..=6 {
        assert!(text.contains(&format!("  {c}  ")), "exit code {c}");
    }
}

#[test]
fn verify_passes_and_lists_every_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in verify::check_names() {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn verify_with_corrupted_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["verify", "--tolerance-scale", "0"], dir.path())), 5);
    write(dir.path(), "v.toml", "[verify]\ntolerance_scale = 1e-30\n");
    assert_eq!(code(&run(&["verify", "--config", "v.toml"], dir.path())), 5);
}

#[test]
fn train_base_writes_checkpoint_and_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let o = trained(dir.path());
    let Checkpoint::Mlp(mlp) = Checkpoint::read(&o.join(io::BASE_CHECKPOINT)).unwrap() else {
        panic!("expected a network checkpoint")
    };
    assert_eq!(mlp.dims(), vec![2, 5, 10, 4, 1]);
    let cs = io::read_constraints(&o.join(io::CONSTRAINTS_CSV)).unwrap();
    assert_eq!(cs.matrix(), &mlp.layers()[2].weights.transpose());
    assert_eq!(io::read_dataset(&o.join(io::DATASET_CSV)).unwrap().len(), 300);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "missing.toml", "[paths]\ndataset = \"nowhere.csv\"\n");
    write(d, "unknown.toml", "[base]\nlearning_rat = 0.1\n");
    for args in [
        vec!["train-base", "--config", "missing.toml"],
        vec!["train-base", "--config", "unknown.toml"],
        vec!["train-base", "--config", "absent.toml"],
        vec!["train-constrained", "--out", "empty"],
        vec!["solve", "--checkpoint", "nope.json", "--instance", "nope.json"],
    ] {
        let out = run(&args, d);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error:"));
    }
}

#[test]
fn pathological_learning_rate_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", "[data]\nn_samples = 200\n[base]\nepochs = 20\nlearning_rate = 1e6\n");
    let out = run(&["train-base", "--config", "c.toml", "--out", "o"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn constrained_runs_are_deterministic_and_aggregated() {
    let dir = tempfile::tempdir().unwrap();
    let o = trained(dir.path());
    let again = dir.path().join("again");
    fs::create_dir_all(&again).unwrap();
    for name in [io::BASE_CHECKPOINT, io::CONSTRAINTS_CSV] {
        fs::copy(o.join(name), again.join(name)).unwrap();
    }
    for out_dir in ["o", "again"] {
        let out = run(&["train-constrained", "--config", "c.toml", "--out", out_dir], dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in [io::run_epochs_csv(1), io::run_epochs_csv(2), io::AGGREGATE_CSV.to_string()] {
        assert_eq!(fs::read(o.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap(), "{name}");
    }
    let rows = io::read_aggregate(&o.join(io::AGGREGATE_CSV)).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.runs, 2);
        assert!(r.min_iters as f64 <= r.mean_iters && r.mean_iters <= r.max_iters as f64);
    }
    let before = fs::read(o.join(io::AGGREGATE_CSV)).unwrap();
    fs::remove_file(o.join(io::AGGREGATE_CSV)).unwrap();
    assert_eq!(code(&run(&["aggregate", "--out", "o"], dir.path())), 0);
    assert_eq!(fs::read(o.join(io::AGGREGATE_CSV)).unwrap(), before);
}

#[test]
fn seed_and_runs_flags_select_run_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = trained(dir.path());
    let out = run(
        &["train-constrained", "--config", "c.toml", "--out", "o", "--seed", "40", "--runs", "1", "--solver-mode", "newton"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stats = io::read_epoch_stats(&o.join(io::run_epochs_csv(40))).unwrap();
    assert_eq!(stats.len(), 4);
    assert!(stats.iter().all(|s| s.max_infeasibility <= 1e-8));
    assert!(!o.join(io::run_epochs_csv(41)).exists());
}

#[test]
fn rank_deficient_stored_matrix_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = trained(dir.path());
    let row = (0..10).map(|k| format!("{}", 0.1 * k as f64 + 0.05)).collect::<Vec<_>>().join(",");
    let header = (1..=10).map(|k| format!("a{k}")).collect::<Vec<_>>().join(",");
    fs::write(o.join(io::CONSTRAINTS_CSV), format!("{header}\n{row}\n{row}\n{row}\n{row}\n")).unwrap();
    let out = run(&["train-constrained", "--config", "c.toml", "--out", "o"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("rank"), "{}", stderr(&out));
}

fn solve(dir: &Path, model: DualModel, instance: &str, extra: &[&str]) -> (i32, Value) {
    let ck = dir.join("model.json");
    Checkpoint::DualModel(model).write(&ck).unwrap();
    write(dir, "instance.json", instance);
    let mut args = vec!["solve", "--checkpoint", "model.json", "--instance", "instance.json"];
    args.extend_from_slice(extra);
    let out = run(&args, dir);
    let json = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (code(&out), json)
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn solve_l2_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cs = ConstraintSet::from_rows(&[vec![1.0, 2.0, 0.0, -1.0], vec![0.5, 0.0, 1.0, 1.0]], None).unwrap();
    let w = DMatrix::from_row_slice(2, 4, &[0.3, -0.2, 0.1, 0.7, -0.4, 0.9, 0.2, 0.0]);
    let bias = DVector::from_vec(vec![0.1, 0.0, -0.3, 0.2]);
    let model = DualModel::new(w, bias, SigmoidFamily::L2, cs.clone()).unwrap();
    let x = DVector::from_vec(vec![0.8, -1.1]);
    let b = DVector::from_vec(vec![1.5, -0.5]);
    let oracle = cs.l2_lambda(&model.wx(&x).unwrap(), &b).unwrap();
    let (status, json) = solve(dir.path(), model, r#"{"x": [0.8, -1.1], "b": [1.5, -0.5]}"#, &["--solver-mode", "newton"]);
    assert_eq!(status, 0);
    assert_eq!(json["converged"], Value::Bool(true));
    let lam = floats(&json["lambda"]);
    for (got, want) in lam.iter().zip(oracle.iter()) {
        assert!((got - want).abs() <= 1e-8);
    }
    assert!(json["infeasibility"].as_f64().unwrap() <= 1e-8);
    assert_eq!(floats(&json["z"]).len(), 4);
}

#[test]
fn solve_unreachable_target_reports_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let cs = ConstraintSet::from_rows(&[vec![1.0, 1.0]], Some(vec![10.0])).unwrap();
    let model = DualModel::new(DMatrix::zeros(1, 2), DVector::zeros(2), SigmoidFamily::Logistic, cs).unwrap();
    let (status, json) = solve(dir.path(), model, r#"{"x": [0.0]}"#, &[]);
    assert_eq!(status, 6);
    assert_eq!(json["converged"], Value::Bool(false));
    assert!(json["infeasibility"].as_f64().unwrap() > 7.9);
}

#[test]
fn solve_from_optimal_start_takes_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cs = ConstraintSet::from_rows(&[vec![1.0, 0.0, 1.0]], Some(vec![0.0])).unwrap();
    let model = DualModel::new(DMatrix::identity(3, 3), DVector::zeros(3), SigmoidFamily::L2, cs).unwrap();
    let (status, json) = solve(dir.path(), model, r#"{"x": [1.0, 2.0, -1.0], "lambda0": [0.0]}"#, &[]);
    assert_eq!(status, 0);
    assert_eq!(json["iterations"].as_u64(), Some(0));
    assert_eq!(floats(&json["z"]), vec![1.0, 2.0, -1.0]);
}

#[test]
fn solve_rejects_bad_instances() {
    let dir = tempfile::tempdir().unwrap();
    let cs = ConstraintSet::from_rows(&[vec![1.0, 1.0]], None).unwrap();
    let model = DualModel::new(DMatrix::zeros(1, 2), DVector::zeros(2), SigmoidFamily::Logistic, cs).unwrap();
    assert_eq!(solve(dir.path(), model.clone(), r#"{"x": [0.0]}"#, &[]).0, 2);
    assert_eq!(solve(dir.path(), model.clone(), r#"{"x": [0.0, 1.0], "b": [1.0]}"#, &[]).0, 2);
    assert_eq!(solve(dir.path(), model, r#"{"x": [0.0], "b": [1.0], "extra": 1}"#, &[]).0, 2);
}

#[test]
fn invalid_solver_mode_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train-constrained", "--solver-mode", "bfgs"], dir.path());
    assert_eq!(code(&out), 2);
}
