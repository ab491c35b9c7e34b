use std::path::Path;
use std::process::{Command, Output};

fn lesionkit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionkit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

const SMALL_CONFIG: &str = r#"
seed = 5

[phantom]
n_cases = 6
max_lesions_per_case = 2
dims = [24, 24, 16]
"#;

#[test]
fn unknown_flag_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lesionkit(&["phantom", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lesionkit(&["phntom"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lesionkit(&["phantom", "--config", "nope.toml", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seed = \"many\"\n").unwrap();
    let out = lesionkit(&["phantom", "--config", "bad.toml", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_without_its_inputs_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lesionkit(&["preprocess", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: "), "diagnostic missing: {stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1);
}

#[test]
fn phantom_stage_runs_then_skips() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL_CONFIG).unwrap();
    let args = ["phantom", "--config", "run.toml", "--out", "run"];

    let out = lesionkit(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("phantom: done"));
    assert!(dir.path().join("run/findings.csv").exists());
    assert!(dir.path().join("run/manifests/phantom.manifest.json").exists());
    assert!(dir.path().join("run/cases/case000/dwi.nvol.json").exists());

    let out = lesionkit(&args, dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("phantom: skipped"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL_CONFIG).unwrap();
    let out = lesionkit(
        &["phantom", "--config", "run.toml", "--seed", "99", "--out", "a"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let out = lesionkit(
        &["phantom", "--config", "run.toml", "--seed", "99", "--out", "b"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));

    let a = std::fs::read(dir.path().join("a/findings.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/findings.csv")).unwrap();
    assert_eq!(a, b);

    let out = lesionkit(
        &["phantom", "--config", "run.toml", "--seed", "100", "--out", "c"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let c = std::fs::read(dir.path().join("c/findings.csv")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = lesionkit(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "phantom",
        "preprocess",
        "augment",
        "features",
        "train-cnn",
        "train-gbm",
        "select-ensemble",
        "predict",
        "evaluate",
        "roc-plot",
    ] {
        assert!(stdout.contains(sub), "help lacks {sub}");
    }
}
