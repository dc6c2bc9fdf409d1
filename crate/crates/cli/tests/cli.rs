//! End-to-end tests of the command-line surface on a miniature
//! configuration: subcommand round trips, determinism, and the exit
//! code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
output_dir = "out"
seeds = [1, 2]

[dataset]
source = "synthetic"
skew_ratio = 0.8
majority_group = 0

[dataset.synthetic]
dim = 4
n = 240
noise_std = 1.0
class_shift = 1.0
group_shift = 0.4

[split]
member_fraction = 0.34
nonmember_fraction = 0.33
shadow_fraction = 0.33

[target]
layer_sizes = [4, 8, 2]
epochs = 4
batch_size = 16
learning_rate = 0.1
weight_decay = 0.0

[intervention]
method = "reweight"
lambda = 0.0

[attacks]
kinds = ["mia_score"]
fd = true
k_shadows = 3
k_shadows_quick = 2

[attacks.shadow_train]
epochs = 4
batch_size = 16
learning_rate = 0.1
weight_decay = 0.0
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairaudit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary must launch")
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generate_train_attack_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();

    for (split, file) in [("all", "all.csv"), ("eval", "eval.csv"), ("shadow", "shadow.csv")] {
        let out = run(&["generate", "--config", cfg, "--out", &p(file), "--split", split]);
        assert!(out.status.success(), "generate {split}: {}", stderr_of(&out));
    }

    let out = run(&["train", "--config", cfg, "--data", &p("all.csv"), "--out", &p("biased.json")]);
    assert!(out.status.success(), "train: {}", stderr_of(&out));
    let out = run(&["fair-train", "--config", cfg, "--data", &p("all.csv"), "--out", &p("fair.json")]);
    assert!(out.status.success(), "fair-train: {}", stderr_of(&out));

    let out = run(&[
        "attack",
        "--target", &p("biased.json"),
        "--kind", "mia_score",
        "--eval", &p("eval.csv"),
        "--shadow-pool", &p("shadow.csv"),
        "--k-shadows", "2",
        "--shadow-epochs", "2",
        "--shadow-batch-size", "16",
    ]);
    assert!(out.status.success(), "attack: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("acc_a"), "attack output: {}", stdout_of(&out));

    // The fd variant needs both models and, for MIA, the intervention.
    let out = run(&[
        "attack",
        "--target", &p("biased.json"),
        "--fair", &p("fair.json"),
        "--config", cfg,
        "--kind", "fd_mia_score",
        "--eval", &p("eval.csv"),
        "--shadow-pool", &p("shadow.csv"),
        "--k-shadows", "2",
        "--shadow-epochs", "2",
        "--shadow-batch-size", "16",
    ]);
    assert!(out.status.success(), "fd attack: {}", stderr_of(&out));
}

#[test]
fn quick_experiment_runs_are_identical_modulo_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let mut reports = Vec::new();
    for name in ["run1", "run2"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "experiment",
            "--config", cfg.to_str().unwrap(),
            "--quick",
            "--seed", "7",
            "--out", out_dir.to_str().unwrap(),
            "--format", "json,csv",
        ]);
        assert!(out.status.success(), "experiment: {}", stderr_of(&out));
        assert!(stdout_of(&out).contains("not acceptance grade"));
        let text = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["payload"]["provenance"]["timestamp"] = serde_json::Value::String(String::new());
        v["checksum"] = serde_json::Value::String(String::new());
        reports.push(v);
        assert!(out_dir.join("tables/attacks.csv").exists());
        assert!(out_dir.join("tables/targets.csv").exists());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn experiment_honors_output_dir_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("env_out");
    let out = bin()
        .args(["experiment", "--config", cfg.to_str().unwrap(), "--quick", "--seed", "3"])
        .env("FAIRAUDIT_OUT", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(out_dir.join("report.json").exists());
}

#[test]
fn missing_config_file_exits_1_and_names_the_path() {
    let out = run(&["experiment", "--config", "/nonexistent/nowhere.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("/nonexistent/nowhere.cfg"), "{}", stderr_of(&out));
}

#[test]
fn unknown_flag_exits_1() {
    let out = run(&["experiment", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn fd_attack_without_fair_model_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let out = run(&["generate", "--config", cfg, "--out", &p("eval.csv"), "--split", "eval"]);
    assert!(out.status.success());
    let out = run(&[
        "attack",
        "--target", &p("missing.json"),
        "--kind", "fd_mia_score",
        "--eval", &p("eval.csv"),
        "--shadow-pool", &p("eval.csv"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("--fair"), "{}", stderr_of(&out));
}

#[test]
fn corrupted_model_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();

    let out = run(&["generate", "--config", cfg, "--out", &p("all.csv"), "--split", "all"]);
    assert!(out.status.success());
    let out = run(&["train", "--config", cfg, "--data", &p("all.csv"), "--out", &p("model.json")]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    // Flip the leading digit of the first parameter without updating
    // the stored checksum.
    let path = dir.path().join("model.json");
    let mut text = std::fs::read_to_string(&path).unwrap();
    let start = text.find("\"params\"").expect("params field");
    let digit = start + text[start..].find(|c: char| c.is_ascii_digit()).unwrap();
    let old = text.as_bytes()[digit];
    let new = if old == b'9' { b'8' } else { old + 1 };
    unsafe { text.as_bytes_mut()[digit] = new };
    std::fs::write(&path, text).unwrap();

    let out = run(&["generate", "--config", cfg, "--out", &p("eval.csv"), "--split", "eval"]);
    assert!(out.status.success());
    let out = run(&[
        "attack",
        "--target", &p("model.json"),
        "--kind", "mia_score",
        "--eval", &p("eval.csv"),
        "--shadow-pool", &p("all.csv"),
        "--k-shadows", "2",
        "--shadow-epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("integrity"), "{}", stderr_of(&out));
}

#[test]
fn unknown_report_format_exits_1() {
    let out = run(&["report", "--in", "/tmp", "--format", "xml"]);
    assert_eq!(out.status.code(), Some(1));
}
