use std::path::Path;
use std::process::{Command, Output};

fn mfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 8] = [
    "--fine-n", "21", "--fine-nt", "41", "--coarse-n", "11", "--coarse-nt", "6",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

#[test]
fn grad_check_passes() {
    let out = mfg(&with_small(&["grad-check", "--directions", "6"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

#[test]
fn bad_configuration_exits_with_two() {
    let out = mfg(&with_small(&["invert", "--test-case", "nope"]));
    assert_eq!(out.status.code(), Some(2));
    // coarse grid that does not nest in the fine one
    let out = mfg(&["invert", "--fine-n", "21", "--coarse-n", "8"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = mfg(&["invert", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_then_invert_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = mfg(&with_small(&["generate", "--output", data.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    let out = mfg(&[
        "invert",
        "--dataset",
        data.to_str().unwrap(),
        "--coarse-n",
        "11",
        "--coarse-nt",
        "6",
        "--fine-n",
        "21",
        "--fine-nt",
        "41",
        "--max-iters",
        "30",
        "--output",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let outcome: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(outcome["errors"]["u_e"].as_f64().unwrap().is_finite());
    for f in ["manifest.json", "iterations.csv", "errors.csv"] {
        assert!(Path::new(&run).join(f).exists(), "{f}");
    }
}

#[test]
fn carleman_diagnostic_reports_positive_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("carleman.json");
    let out = mfg(&[
        "diag-carleman",
        "--n",
        "11",
        "--nt",
        "11",
        "--lambdas",
        "2,4",
        "--output",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["min_forward"].as_f64().unwrap() > 0.0);
}
