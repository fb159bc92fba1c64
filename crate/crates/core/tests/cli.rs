use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bilevel"));
    cmd.env_remove("BILEVEL_OUTPUT_DIR").env("RUST_LOG", "warn");
    cmd
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL_GRADCHECK: &str = r#"
kind = "gradcheck"
seed = 3
[problem]
target = "ridge"
[dynamics]
name = "gd"
eta = 0.01
horizon = 5
[check]
points = 2
"#;

#[test]
fn list_experiments_names_every_kind() {
    let out = bin().arg("list-experiments").output().unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in ["hyperclean", "hyperrepr", "ridge-verify", "gradcheck", "convergence"] {
        assert!(text.contains(kind), "missing {kind}");
    }
}

#[test]
fn validate_accepts_shipped_configs() {
    for entry in std::fs::read_dir(config("")).unwrap() {
        let path = entry.unwrap().path();
        let out = bin().arg("validate").arg(&path).output().unwrap();
        assert_eq!(code(&out), 0, "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "kind = \"gradcheck\"\nseed = 1\nunknown_key = 3\n").unwrap();
    let out = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(code(&out), 2);
    let out = bin().arg("run").arg(&bad).output().unwrap();
    assert_eq!(code(&out), 2);
    let out = bin().arg("run").arg(dir.path().join("missing.toml")).output().unwrap();
    assert_ne!(code(&out), 0);
}

#[test]
fn passing_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gc.toml");
    std::fs::write(&cfg, SMALL_GRADCHECK).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin().arg("run").arg(&cfg).arg("--output-dir").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["summary.json", "verdict.json", "meta.json"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PASS mode_agreement"));
}

#[test]
fn failing_verdict_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gc.toml");
    std::fs::write(&cfg, format!("{SMALL_GRADCHECK}fd_tolerance = 1e-20\n")).unwrap();
    let out = bin().arg("run").arg(&cfg).arg("--output-dir").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL fd_agreement"));
}

#[test]
fn output_dir_env_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gc.toml");
    std::fs::write(&cfg, SMALL_GRADCHECK).unwrap();
    let target = dir.path().join("from-env");
    let out = bin().env("BILEVEL_OUTPUT_DIR", &target).arg("run").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(target.join("summary.json").exists());
}
