use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tezo-bench")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn zero_rho_is_a_validation_error() {
    let out = bench(&["train", "--optimizer", "tezo", "--objective", "quad4", "--steps", "5", "--rho", "0"]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_key_is_a_validation_error() {
    let out = bench(&["train", "--optimizer", "tezo", "--objective", "quad4", "--set", "learning_rate=0.1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_flag_exits_one() {
    assert_eq!(code(&bench(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&bench(&["frobnicate"])), 1);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let out = bench(&["--out", "/nonexistent-dir/x/report.csv", "count", "--m", "4", "--n", "4", "--r", "2", "--steps", "3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = bench(&["train", "--config", "/nonexistent-dir/run.cfg"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_run_exits_three() {
    let out = bench(&["train", "--optimizer", "mezo", "--objective", "quad8", "--steps", "400", "--eta", "5"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("diverged"));
}

fn replay_roundtrip(dir: &Path, format: &str) {
    let first = dir.join(format!("first.{format}"));
    let second = dir.join(format!("second.{format}"));
    let args = ["--optimizer", "tezo-m", "--objective", "mlp:5,6,3", "--steps", "30", "--rank", "2", "--eta", "1e-3"];
    let mut a = vec!["--seed", "9", "--format", format, "--out", first.to_str().unwrap(), "train"];
    a.extend(args);
    assert_eq!(code(&bench(&a)), 0);
    let out = bench(&["--format", format, "--out", second.to_str().unwrap(), "train", "--replay", first.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn replay_reproduces_csv_and_json_reports() {
    let dir = tempfile::tempdir().unwrap();
    replay_roundtrip(dir.path(), "csv");
    replay_roundtrip(dir.path(), "json");
}

#[test]
fn config_file_and_flags_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\noptimizer = tezo\nobjective = quad6\nsteps = 40\nrank = 2\n").unwrap();
    let from_file = bench(&["--seed", "4", "train", "--config", cfg.to_str().unwrap()]);
    let from_flags = bench(&["--seed", "4", "train", "--optimizer", "tezo", "--objective", "quad6", "--steps", "40", "--rank", "2"]);
    assert_eq!(code(&from_file), 0);
    assert_eq!(stdout(&from_file), stdout(&from_flags));
}

#[test]
fn timing_column_is_opt_in() {
    let plain = stdout(&bench(&["train", "--optimizer", "tezo", "--objective", "quad4", "--steps", "10"]));
    let timed = stdout(&bench(&["train", "--optimizer", "tezo", "--objective", "quad4", "--steps", "10", "--timing"]));
    assert!(!plain.contains("wall_ms"));
    assert!(timed.contains("wall_ms"));
}

#[test]
fn sweep_emits_one_row_per_run() {
    let out = bench(&["--seed", "2", "train", "--optimizer", "tezo", "--objective", "quad4", "--steps", "20", "--sweep", "3"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 4, "{data:?}");
    assert!(data[0].starts_with("run,seed"));
}

#[test]
fn json_outputs_parse() {
    for args in [
        &["--format", "json", "train", "--optimizer", "tezo", "--objective", "quad4", "--steps", "10"][..],
        &["--format", "json", "count", "--m", "8", "--n", "6", "--r", "2", "--steps", "10"],
        &["--format", "json", "stats", "--trials", "10000"],
        &["--format", "json", "cross", "--trials", "10000"],
    ] {
        let out = bench(args);
        assert_eq!(code(&out), 0, "{args:?}");
        let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        assert!(v.is_object(), "{args:?}");
    }
}

#[test]
fn count_lists_methods() {
    let out = bench(&["count", "--m", "8", "--n", "6", "--r", "2", "--steps", "10"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for m in ["mezo", "tezo", "lozo", "subzo"] {
        assert!(text.contains(m), "missing {m} in\n{text}");
    }
}

#[test]
fn small_trial_count_is_rejected() {
    assert_eq!(code(&bench(&["stats", "--trials", "10"])), 1);
}

#[test]
fn moment_error_runs() {
    let out = bench(&["moment-error", "--sizes", "8,16", "--r", "2", "--steps", "100", "--runs", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().filter(|l| !l.starts_with('#')).count() >= 3);
}

#[test]
fn rank_reads_a_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.txt");
    std::fs::write(&model, "layer a 2 2\n3 0\n0 1\nlayer b 3 2\n1 0\n0 1\n0 0\nlayer bias 3 1\n1\n2\n3\n").unwrap();
    let out = bench(&["rank", "--model", model.to_str().unwrap(), "--threshold", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains('a') && text.contains('b'));
}

#[test]
fn spectrum_runs_both_views() {
    for extra in [&[][..], &["--cosines"]] {
        let mut a = vec!["spectrum", "--objective", "mlp:5,6,3", "--steps", "3", "--k", "2"];
        a.extend(extra);
        let out = bench(&a);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(!stdout(&out).is_empty());
    }
}
