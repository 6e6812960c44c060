use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn varband(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varband"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn validate_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("example_bandit.json");
    let out = varband(&["validate", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = varband(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_config_path_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(varband(&["validate"], tmp.path()).status.code(), Some(2));
    assert_eq!(
        varband(&["run", "--jobs", "0", "x.json"], tmp.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn invalid_config_exits_with_one_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(
        &path,
        r#"{"kind":"bandit","d":2,"K":10,"seeds":[1],"delta":1.5}"#,
    )
    .unwrap();
    let out = varband(&["validate", path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"kind":"bandit","d":2,"K":200,"seeds":[1,2],"R":0.5,
            "learners":[{"type":"save"},{"type":"oful"}]}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = varband(
        &[
            "run",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--jobs",
            "1",
        ],
        tmp.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("summary.csv").exists());
    let rep = varband(&["report", out_dir.to_str().unwrap()], tmp.path());
    assert_eq!(rep.status.code(), Some(0));
    assert_eq!(rep.stdout, out.stdout);
    assert_eq!(
        varband(&["report", "nowhere"], tmp.path()).status.code(),
        Some(1)
    );
}

#[test]
fn falsify_requires_a_falsifier_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("example_bandit.json");
    let out = varband(&["falsify", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
