//! Black-box tests of the command-line binary: the full generate → train →
//! evaluate → diagnose → report → sweep pipeline on a miniature dataset,
//! the config error paths, and determinism across processes and worker
//! pools. Everything runs through `std::process::Command`, so environment
//! variables stay isolated per invocation.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_CONFIG: &str = "\
data.num_classes = 2
data.train_counts = 16, 8
data.val_count = 4
data.test_count = 6
data.d_inv = 2
data.d_spu = 3
data.sigma = 0.5
data.nodes_min = 2
data.nodes_max = 4
train.method = erm_nnr_cmo_kl
train.epochs = 4
train.batch_size = 8
train.learning_rate = 0.1
train.seeds = 1, 2
train.embedding_dim = 6
model.num_layers = 1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robust-shift"))
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    for (key, value) in envs {
        cmd.env(key, value);
    }
    cmd.output().expect("binary spawns")
}

fn run_ok(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let out = run(args, envs);
    assert!(
        out.status.success(),
        "`{args:?}` failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

/// Writes the tiny config and generates its dataset, returning the paths.
fn generated_workspace() -> (TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.conf");
    let data = dir.path().join("tiny.jsonl");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    run_ok(
        &["gen-data", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()],
        &[],
    );
    (dir, config, data)
}

fn path_str(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let (dir, config, data) = generated_workspace();
    assert!(data.is_file());
    let first_line = std::fs::read_to_string(&data).unwrap().lines().next().unwrap().to_string();
    assert!(first_line.contains("num_classes"), "header line: {first_line}");

    // train: emits the aggregate CSV on stdout and writes the run directory.
    let run_dir = dir.path().join("run");
    let out = run_ok(
        &[
            "train",
            "--config",
            path_str(&config),
            "--data",
            path_str(&data),
            "--out",
            path_str(&run_dir),
        ],
        &[],
    );
    let text = stdout(&out);
    assert!(text.contains("method,noise_rate,minority_avg"), "stdout: {text}");
    assert!(text.contains("erm_nnr_cmo_kl,0"), "stdout: {text}");
    assert!(run_dir.join("report.json").is_file());
    assert!(run_dir.join("model_seed_1.json").is_file());
    assert!(run_dir.join("model_seed_2.json").is_file());

    // evaluate: prints a JSON accuracy report for one saved model.
    let model = run_dir.join("model_seed_1.json");
    let out = run_ok(
        &["evaluate", "--model", path_str(&model), "--data", path_str(&data)],
        &[],
    );
    let eval: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("evaluate JSON");
    assert!(eval.get("overall").is_some(), "evaluate output: {eval}");

    // diagnose: prints the embedding-space diagnostic report.
    let out = run_ok(
        &["diagnose", "--model", path_str(&model), "--data", path_str(&data)],
        &[],
    );
    let diag: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("diagnose JSON");
    assert!(diag.get("gamma_emb").is_some(), "diagnose output: {diag}");
    assert!(diag.get("margin_losses").is_some(), "diagnose output: {diag}");

    // report: scans the run directory into the aggregate CSV.
    let out = run_ok(&["report", "--dir", path_str(&run_dir)], &[]);
    let table = stdout(&out);
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,noise_rate,minority_avg,minority_std,minority_max,overall_avg,overall_std"
    );
    assert!(lines.next().unwrap().starts_with("erm_nnr_cmo_kl,"), "table: {table}");

    // sweep: grid rows over the tuning axes, one CSV line per point.
    let grid = dir.path().join("grid.conf");
    std::fs::write(&grid, "sweep.gamma = 1.0, 2.0\n").unwrap();
    let out = run_ok(
        &["sweep", "--config", path_str(&config), "--grid", path_str(&grid)],
        &[],
    );
    let sweep_text = stdout(&out);
    assert_eq!(sweep_text.lines().count(), 3, "sweep output: {sweep_text}");
    assert!(sweep_text.starts_with("gamma,lambda1,lambda2,eta_q"), "sweep output: {sweep_text}");
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "data.bogus_knob = 3\n").unwrap();
    let out = run(
        &["gen-data", "--config", path_str(&config), "--out", path_str(&dir.path().join("d.jsonl"))],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("data.bogus_knob"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_sweep_key_is_rejected_by_name() {
    let (dir, config, _data) = generated_workspace();
    let grid = dir.path().join("grid.conf");
    std::fs::write(&grid, "sweep.rho = 1.0\n").unwrap();
    let out = run(
        &["sweep", "--config", path_str(&config), "--grid", path_str(&grid)],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("sweep.rho"), "stderr: {}", stderr(&out));
}

#[test]
fn invalid_worker_cap_is_rejected_by_name() {
    let (dir, config, data) = generated_workspace();
    let out = run(
        &[
            "train",
            "--config",
            path_str(&config),
            "--data",
            path_str(&data),
            "--out",
            path_str(&dir.path().join("run")),
        ],
        &[("ROBUST_SHIFT_THREADS", "abc")],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ROBUST_SHIFT_THREADS"), "stderr: {}", stderr(&out));
}

#[test]
fn reports_are_identical_across_worker_counts() {
    let (dir, config, data) = generated_workspace();
    let mut reports = Vec::new();
    for threads in ["1", "2"] {
        let run_dir = dir.path().join(format!("run_{threads}"));
        run_ok(
            &[
                "train",
                "--config",
                path_str(&config),
                "--data",
                path_str(&data),
                "--out",
                path_str(&run_dir),
            ],
            &[("ROBUST_SHIFT_THREADS", threads)],
        );
        reports.push(std::fs::read(run_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1], "report bytes differ between worker pools");
}

#[test]
fn generation_is_identical_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.conf");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let mut files = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let data = dir.path().join(name);
        run_ok(
            &["gen-data", "--config", path_str(&config), "--out", path_str(&data)],
            &[],
        );
        files.push(std::fs::read(&data).unwrap());
    }
    assert_eq!(files[0], files[1], "dataset bytes differ between processes");
}

#[test]
fn missing_model_file_fails_cleanly() {
    let (dir, _config, data) = generated_workspace();
    let out = run(
        &[
            "evaluate",
            "--model",
            path_str(&dir.path().join("no_such_model.json")),
            "--data",
            path_str(&data),
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
}
