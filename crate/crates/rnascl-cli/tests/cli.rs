use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rnascl"))
}

fn test_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rnascl-cli-{}-{name}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// Small enough to finish in about a second; the standard arm skips
// teacher training.
const TINY: &[&str] = &[
    "data.train_per_class=10",
    "data.test_per_class=5",
    "data.size=8",
    "search.arm=standard",
    "search.epochs=1",
    "search.batch_size=10",
    "search.stages=[{ depth = 1, choices = [4] }]",
];

fn tiny_args(cmd: &str, out: &Path) -> Vec<String> {
    let mut args = vec![
        cmd.to_string(),
        "--config".into(),
        "/dev/null".into(),
        "--out".into(),
        out.display().to_string(),
    ];
    for s in TINY {
        args.push("--set".into());
        args.push((*s).into());
    }
    args
}

#[test]
fn search_then_derive_produces_artifacts() {
    let out = test_dir("pipeline");
    let status = bin().args(tiny_args("search", &out)).status().unwrap();
    assert!(status.success());
    assert!(out.join("search.ckpt").exists());
    assert!(out.join("search_metrics.csv").exists());
    let status = bin().args(tiny_args("derive", &out)).status().unwrap();
    assert!(status.success());
    assert!(out.join("arch.toml").exists());
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let output = bin().args(["search", "--bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn pipeline_errors_exit_one_with_message() {
    // Train before search: the run directory has no manifest yet.
    let out = test_dir("no-search");
    let output = bin().args(tiny_args("train", &out)).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn malformed_set_override_is_rejected() {
    let out = test_dir("bad-set");
    let output = bin()
        .args([
            "search",
            "--config",
            "/dev/null",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "search.epochs",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error:"));
    std::fs::remove_dir_all(&out).unwrap();
}
