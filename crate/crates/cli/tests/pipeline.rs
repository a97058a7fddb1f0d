//! CLI behaviour outside the happy path: exit codes, artifact
//! dependencies between commands, and the shipped platform files.

use std::fs;
use std::path::Path;
use std::process::Command;

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qcascade"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen_fixture(dir: &Path) {
    let out = run_cli(&[
        "gen-fixture",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "7",
        "--samples",
        "64",
    ]);
    assert!(out.status.success());
}

#[test]
fn missing_model_is_a_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_cli(&[
        "quantize",
        "--model",
        "/nonexistent/model",
        "--eval-set",
        "/nonexistent/eval",
        "--tolerance",
        "0.05",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tune_ceu_names_the_missing_upstream_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = tmp.path().join("fix");
    gen_fixture(&fix);
    let out = run_cli(&[
        "tune-ceu",
        "--model",
        fix.join("model").to_str().unwrap(),
        "--eval-set",
        fix.join("eval").to_str().unwrap(),
        "--tolerance",
        "0.05",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lpu_scheme.json"), "stderr: {stderr}");
    assert!(stderr.contains("quantize"), "stderr: {stderr}");
}

#[test]
fn report_names_its_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_cli(&["report", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("quantize_summary.json"), "stderr: {stderr}");
}

#[test]
fn infeasible_platform_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = tmp.path().join("fix");
    gen_fixture(&fix);
    let out_dir = tmp.path().join("out");
    let quantize = run_cli(&[
        "quantize",
        "--model",
        fix.join("model").to_str().unwrap(),
        "--eval-set",
        fix.join("eval").to_str().unwrap(),
        "--tolerance",
        "0.1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(quantize.status.success());

    // Shrink the off-chip memory below a single sample.
    let platform_path = fix.join("platform.json");
    let text = fs::read_to_string(&platform_path).unwrap();
    let mut platform: serde_json::Value = serde_json::from_str(&text).unwrap();
    platform["offchip_capacity"] = serde_json::json!(10);
    fs::write(
        &platform_path,
        serde_json::to_string_pretty(&platform).unwrap(),
    )
    .unwrap();

    let out = run_cli(&[
        "dse",
        "--model",
        fix.join("model").to_str().unwrap(),
        "--platform",
        platform_path.to_str().unwrap(),
        "--batch",
        "64",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("off-chip"), "stderr: {stderr}");
}

#[test]
fn negative_tolerance_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = tmp.path().join("fix");
    gen_fixture(&fix);
    let out = run_cli(&[
        "quantize",
        "--model",
        fix.join("model").to_str().unwrap(),
        "--eval-set",
        fix.join("eval").to_str().unwrap(),
        "--tolerance",
        "-0.5",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rerunning_in_place_rewrites_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = tmp.path().join("fix");
    gen_fixture(&fix);
    let out_dir = tmp.path().join("out");
    let quantize = || {
        let out = run_cli(&[
            "quantize",
            "--model",
            fix.join("model").to_str().unwrap(),
            "--eval-set",
            fix.join("eval").to_str().unwrap(),
            "--tolerance",
            "0.1",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    };
    quantize();
    let snapshot = |name: &str| fs::read(out_dir.join(name)).unwrap();
    let before: Vec<Vec<u8>> = ["lpu_scheme.json", "hpu_scheme.json", "quant_sweep.csv"]
        .iter()
        .map(|n| snapshot(n))
        .collect();
    quantize();
    for (name, bytes) in ["lpu_scheme.json", "hpu_scheme.json", "quant_sweep.csv"]
        .iter()
        .zip(&before)
    {
        assert_eq!(&snapshot(name), bytes, "{name} changed on rerun");
    }
}

#[test]
fn tune_ceu_defaults_to_two_hundred_tuning_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = tmp.path().join("fix");
    let out = run_cli(&[
        "gen-fixture",
        "--out",
        fix.to_str().unwrap(),
        "--seed",
        "7",
        "--samples",
        "256",
    ]);
    assert!(out.status.success());
    let out_dir = tmp.path().join("out");
    for cmd in ["quantize", "tune-ceu"] {
        let out = run_cli(&[
            cmd,
            "--model",
            fix.join("model").to_str().unwrap(),
            "--eval-set",
            fix.join("eval").to_str().unwrap(),
            "--tolerance",
            "0.05",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{cmd} failed");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ceu_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["tune_samples_used"], 200);
}

#[test]
fn shipped_platform_files_load_and_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../platforms");
    for name in ["zc706.json", "zcu102.json"] {
        let platform = qcascade::dse::PlatformModel::load(&root.join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        platform.validate().unwrap();
        // Narrow wordlengths pack two MACCs per DSP on these devices.
        assert_eq!(platform.macc_per_dsp[&4], 2.0, "{name}");
        assert_eq!(platform.macc_per_dsp[&8], 1.0, "{name}");
    }
}
