//! End-to-end runs of the `vtfusion` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vtfusion(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtfusion"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = vtfusion(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Every file below `dir` except run manifests, which record wall time.
fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.txt" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("train.cfg"), "epochs = 2\nbatch_size = 32\nwarmup_steps = 5\n").unwrap();
    ok(&["demo-gen", "--task", "lid_open", "--n", "6", "--seed", "3", "--out", "data/lid.cfbd"], dir);
    let s = ok(
        &["train", "--task", "lid_open", "--strategy", "gated_cfg", "--config", "train.cfg", "--data", "data/lid.cfbd", "--seed", "1", "--out", "run"],
        dir,
    );
    assert!(s.contains("trained gated_cfg on lid_open"), "{s}");
    let s = ok(&["eval", "--ckpt", "run/model.cfck", "--episodes", "3", "--seed", "5"], dir);
    assert!(s.contains("/3 successes"), "{s}");
    ok(&["analyze-weights", "--traces", "run/eval"], dir);
}

#[test]
fn pipeline_artifacts_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let names: Vec<String> = fa.iter().map(|(p, _)| p.display().to_string()).collect();
    for want in ["data/lid.cfbd", "run/model.cfck", "run/loss.csv", "run/eval/episodes.csv", "run/eval/traces.csv"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    assert_eq!(fa, fb);
    for d in ["data", "run", "run/eval", "run/eval/weights"] {
        assert!(a.path().join(d).join("run_manifest.txt").exists(), "{d}");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad_tag = vtfusion(&["train", "--strategy", "banana", "--out", "x"], d);
    assert_eq!(bad_tag.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_tag.stderr).contains("gated_cfg"));

    std::fs::write(d.join("bad.cfg"), "epochs = 2\nlearning_speed = 3\n").unwrap();
    let bad_key = vtfusion(&["train", "--config", "bad.cfg", "--out", "x"], d);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("line 2"));

    std::fs::write(d.join("junk.cfck"), b"not a checkpoint").unwrap();
    assert_eq!(vtfusion(&["eval", "--ckpt", "junk.cfck"], d).status.code(), Some(2));
    assert_eq!(vtfusion(&["eval", "--ckpt", "absent.cfck"], d).status.code(), Some(2));
    assert_eq!(vtfusion(&["--help"], d).status.code(), Some(0));
}

#[test]
fn empty_trace_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("traces")).unwrap();
    let s = ok(&["analyze-weights", "--traces", "traces"], dir.path());
    assert!(s.contains("No weight traces were found."), "{s}");
    assert!(dir.path().join("traces/weights/weights_summary.csv").exists());
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(&["--sequential", "selftest"], dir.path());
    assert!(!s.contains("FAIL"), "{s}");
}
