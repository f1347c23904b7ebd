use std::path::Path;
use std::process::{Command, Output};

const SPECTRAL: &str = r#"{
    "experiment": "spectral",
    "trap": {"kind": "hard_wall", "lower": [0.0], "upper": [3.141592653589793]},
    "n": 101,
    "seed": 5
}"#;

fn symbridge(args: &[&str], cfg: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symbridge"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = symbridge(&["validate"], &write_config(dir.path(), SPECTRAL));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SPECTRAL.replace(",\n    \"seed\": 5", ""));
    let out = symbridge(&["validate"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed required"));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SPECTRAL.replace("\"n\": 101", "\"n\": 101, \"grid_size\": 3"));
    let out = symbridge(&["run", "--out", dir.path().join("o").to_str().unwrap()], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid_size"));
}

#[test]
fn spectral_run_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPECTRAL);
    let out_dir = dir.path().join("out");
    let out = symbridge(&["run", "--out", out_dir.to_str().unwrap()], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS spectral."));

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["config"]["seed"], 5);
    let artifacts = report["artifacts"].as_array().unwrap();
    assert!(!artifacts.is_empty());
    for a in artifacts {
        let name = a.as_str().unwrap();
        let text = std::fs::read_to_string(out_dir.join(name)).unwrap();
        if name.ends_with(".csv") {
            assert!(text.starts_with('#'), "{name} lacks a metadata header");
        }
    }
}

#[test]
fn failing_check_gives_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    // A 6-node grid cannot reach the default eigenvalue tolerance.
    let cfg = write_config(dir.path(), &SPECTRAL.replace("\"n\": 101", "\"n\": 6"));
    let out = symbridge(&["run", "--out", dir.path().join("o").to_str().unwrap()], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL "));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
        "experiment": "ensemble",
        "trap": {"kind": "hard_wall", "lower": [0.0], "upper": [3.141592653589793]},
        "n": 21, "beta": 0.5, "particles": 3, "steps": 8, "n_samples": 500, "seed": 11
    }"#;
    let cfg = write_config(dir.path(), text);
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let o = dir.path().join(name);
        let out = symbridge(&["run", "--threads", "2", "--out", o.to_str().unwrap()], &cfg);
        assert_ne!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&o)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        runs.push(files);
    }
    assert!(!runs[0].is_empty());
    assert_eq!(runs[0], runs[1]);
}
