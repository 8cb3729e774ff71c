//! End-to-end checks of the command-line binary: exit codes, JSON error
//! output, flag-over-file precedence, and run-to-run determinism.

use std::path::Path;
use std::process::{Command, Output};

fn qsvd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsvd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = qsvd(args, cwd);
    assert!(
        out.status.success(),
        "qsvd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn full_chain_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    ok(
        &["gen", "--out", "model", "--calib", "calib", "--embed-dim", "16", "--layers", "2", "--heads", "2", "--seq-len", "8", "--samples", "4", "--seed", "5"],
        dir,
    );
    ok(&["factorize", "--model", "model", "--out", "fac", "--seed", "5"], dir);
    ok(&["score", "--model", "fac", "--calib", "calib", "--out", "scores.json"], dir);
    ok(&["allocate", "--scores", "scores.json", "--budget", "count:20", "--out", "alloc.json"], dir);
    ok(&["compress", "--model", "fac", "--allocation", "alloc.json", "--out", "comp"], dir);
    ok(&["quantize", "--model", "comp", "--scheme", "w8a8", "--out", "quant", "--seed", "5"], dir);
    ok(&["eval", "--model", "quant", "--baseline", "model", "--calib", "calib", "--out", "eval.json"], dir);
    let cost = ok(&["cost", "--model", "comp", "--seq-len", "8"], dir);
    let table = String::from_utf8(cost.stdout).unwrap();
    assert!(table.contains("joint-svd") && table.contains("R2"), "{table}");

    let eval: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["output_mse_vs_baseline"].as_f64().unwrap().is_finite());
    assert_eq!(eval["config"]["scheme"], "fp"); // eval ran without --scheme

    // Format error: missing manifest.
    let out = qsvd(&["factorize", "--model", "missing", "--out", "x"], dir);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "format");

    // Usage error: whitening without calibration.
    let out = qsvd(
        &["factorize", "--model", "model", "--whiten", "activation", "--out", "x"],
        dir,
    );
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    // Usage error: malformed flag value.
    let out = qsvd(&["allocate", "--scores", "scores.json", "--budget", "nope", "--out", "y"], dir);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        &["gen", "--out", "model", "--calib", "calib", "--embed-dim", "8", "--layers", "2", "--heads", "2", "--seq-len", "4", "--samples", "2"],
        dir,
    );
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"seed": 9, "scheme": "w8a4", "budget": "count:6"}"#,
    )
    .unwrap();
    ok(&["factorize", "--model", "model", "--out", "fac", "--config", "cfg.json"], dir);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("fac/factorize_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config"]["seed"], 9);
    assert_eq!(report["config"]["scheme"], "w8a4");

    // The flag wins over the file.
    ok(&["factorize", "--model", "model", "--out", "fac2", "--config", "cfg.json", "--seed", "11"], dir);
    let report2: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("fac2/factorize_report.json")).unwrap())
            .unwrap();
    assert_eq!(report2["config"]["seed"], 11);
    assert_ne!(report["config_hash"], report2["config_hash"]);

    // Unknown config keys are rejected as a format problem.
    std::fs::write(dir.join("bad.json"), r#"{"sead": 9}"#).unwrap();
    let out = qsvd(&["factorize", "--model", "model", "--out", "z", "--config", "bad.json"], dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        &["gen", "--out", "model", "--embed-dim", "8", "--layers", "2", "--heads", "2", "--seed", "3"],
        dir,
    );
    ok(&["factorize", "--model", "model", "--out", "a", "--seed", "3"], dir);
    ok(&["factorize", "--model", "model", "--out", "b", "--seed", "3"], dir);
    for f in ["manifest.json", "tensors.bin", "qsvd_meta.json"] {
        assert_eq!(
            std::fs::read(dir.join("a").join(f)).unwrap(),
            std::fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn threads_flag_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        &["gen", "--out", "model", "--embed-dim", "8", "--layers", "1", "--heads", "2"],
        dir,
    );
    ok(&["factorize", "--model", "model", "--out", "fac", "--threads", "2"], dir);
    let out = qsvd(&["factorize", "--model", "model", "--out", "x", "--threads", "0"], dir);
    assert_eq!(out.status.code(), Some(3));
}
