use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn isekf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isekf")).args(args).output().unwrap()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = isekf(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn certify_linear_prints_bounds() {
    let out = isekf(&["certify", config("linear.cfg").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("asymptotic_bound"));
    assert!(text.contains("bound check: 2001 samples"));
}

#[test]
fn run_accepts_config_flag_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = isekf(&[
        "run",
        "--config",
        config("paper.cfg").to_str().unwrap(),
        "--seed",
        "3",
        "--filters",
        "ekf,lsigma-ekf",
        "--ell",
        "2.5",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("lsigma-ekf") && !text.contains("is-ekf"));
    assert!(tmp.path().join("trace.csv").exists());
    assert!(tmp.path().join("trajectory.svg").exists());
}

#[test]
fn invalid_config_exits_1_naming_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.cfg");
    std::fs::write(&path, "[filters.is-ekf]\nlambda1 = [1.5, 0.5, 0.1]\n").unwrap();
    let out = isekf(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("filters.is-ekf.lambda1"));

    let out = isekf(&["run", tmp.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn uncertifiable_system_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.cfg");
    let text = std::fs::read_to_string(config("linear.cfg")).unwrap().replace("alpha = 0.01", "alpha = 0.9");
    std::fs::write(&path, text).unwrap();
    let out = isekf(&["certify", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("certification failed"));
}
