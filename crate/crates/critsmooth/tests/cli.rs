//! End-to-end runs of the `critsmooth` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_critsmooth")).args(args).arg("--out").arg(out).output().unwrap();
    (o.status.code().unwrap(), format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr)))
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_shipped_fixture_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["validate", "--model", fixture("rank1_2d.toml").to_str().unwrap()], dir.path());
    assert_eq!(code, 0);
    let manifest = json(dir.path().join("manifest.json"));
    assert_eq!(manifest["files"][0]["name"], "validate.json");
    assert_eq!(manifest["exit_code"], 0);
}

#[test]
fn calibrate_mixture_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = run(&["calibrate", "--model", fixture("c14.toml").to_str().unwrap()], dir.path());
    assert_eq!(code, 2, "{msg}");
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn calibrate_writes_record() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["calibrate", "--model", fixture("rank1_2d.toml").to_str().unwrap()], dir.path());
    assert_eq!(code, 0);
    let rec = json(dir.path().join("calibration.json"));
    assert!((rec["alpha"].as_f64().unwrap() - 0.78959156367).abs() < 1e-9);
    assert!(rec["res_m"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn many_to_one_at_depth_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["many2one", "--model", fixture("rank1_2d.toml").to_str().unwrap(), "--n", "2"], dir.path());
    assert_eq!(code, 0);
    assert!(json(dir.path().join("many2one.json"))["max_abs_error"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn missing_model_exits_4_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = run(&["validate", "--model", "no/such/model.toml"], dir.path());
    assert_eq!(code, 4);
    assert!(msg.contains("no/such/model.toml"), "{msg}");
}

#[test]
fn unknown_flag_and_config_key_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["validate", "--model", fixture("rank1_2d.toml").to_str().unwrap(), "--bogus", "1"], dir.path());
    assert_eq!(code, 4);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "depht = 3\n").unwrap();
    let (code, msg) = run(&["validate", "--model", fixture("rank1_2d.toml").to_str().unwrap(), "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code, 4, "{msg}");
}

#[test]
fn cap_overflow_is_deferred_to_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = run(&["martingale", "--model", fixture("rank1_2d.toml").to_str().unwrap(), "--depth", "25", "--cap", "1000", "--replicates", "2"], dir.path());
    assert_eq!(code, 3, "{msg}");
    assert!(msg.contains("cap"), "{msg}");
}

#[test]
fn trajectory_and_regen_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture("rank1_2d_b.toml");
    assert_eq!(run(&["mrw", "--model", model.to_str().unwrap(), "--n", "50"], dir.path()).0, 0);
    let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "n,u1,u2,S");
    assert_eq!(text.lines().count(), 52);
    assert_eq!(run(&["regen", "--model", model.to_str().unwrap(), "--n", "2000"], dir.path()).0, 0);
    let text = std::fs::read_to_string(dir.path().join("regen.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "k,sigma,V_increment");
}

#[test]
fn manifest_hashes_match_outputs() {
    use sha2::{Digest, Sha256};
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(&["spectral", "--model", fixture("rank1_2d.toml").to_str().unwrap(), "--s", "0.2:1.0:0.2"], dir.path());
    assert_eq!(code, 0);
    let manifest = json(dir.path().join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert!(!files.is_empty());
    for f in files {
        let bytes = std::fs::read(dir.path().join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    let csv = std::fs::read_to_string(dir.path().join("spectral.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "s,k,m,m_prime");
    assert_eq!(csv.lines().count(), 6);
}
