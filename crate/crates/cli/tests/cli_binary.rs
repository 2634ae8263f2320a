//! Exit-code and stream contracts of the compiled binary.

use std::process::{Command, Stdio};

fn tracedup() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tracedup"))
}

#[test]
fn help_and_version_exit_zero() {
    let out = tracedup().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ingest") && text.contains("dedup") && text.contains("bench"));

    let out = tracedup().arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let out = tracedup().arg("nonsense-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let out = tracedup()
        .args(["--state", dir.path().to_str().unwrap(), "ingest", "--adapter", "bogus", "x.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adapter"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, "not json at all\n").unwrap();
    let out = tracedup()
        .args(["--state", dir.path().join("state").to_str().unwrap(), "ingest", "--strict"])
        .arg(&input)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "strict mode names the line: {stderr}");
}

#[test]
fn missing_artifacts_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = tracedup()
        .args(["--state", dir.path().to_str().unwrap(), "dedup"])
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("artifact"));

    let out = tracedup()
        .args(["--state", dir.path().to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inspect_lists_missing_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = tracedup()
        .args(["--state", dir.path().to_str().unwrap(), "inspect"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("missing"));
    assert!(text.contains("vocab.json"));
}

#[test]
fn a_held_lock_refuses_a_second_command() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "held\n").unwrap();
    let out = tracedup()
        .args(["--state", dir.path().to_str().unwrap(), "inspect"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"));
}
