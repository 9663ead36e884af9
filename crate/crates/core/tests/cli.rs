use std::fs;
use std::path::Path;

mod common;

use common::*;
use serde_json::Value;

#[test]
fn desk_pipeline_produces_all_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    fs::write(dir.join("cfg.json"), r#"{"training": {"epochs": 2}}"#).unwrap();
    ok(dir, &["simulate", "--config", "cfg.json", "--out-dir", "sim"]);
    for f in ["input.json", "input.raw", "reference.json", "reference.raw", "phantom.json", "phantom.raw", "truth.json"] {
        assert!(dir.join("sim").join(f).exists(), "{f}");
    }
    ok(dir, &["fdk", "--proj", "sim/input.json", "--out", "input_fdk.json"]);
    ok(dir, &["fdk", "--proj", "sim/reference.json", "--out", "reference_fdk.json", "--window", "hann"]);
    fs::write(dir.join("pairs.txt"), "# input target\ninput_fdk.json reference_fdk.json\n").unwrap();
    ok(dir, &["train-prior", "--pairs", "pairs.txt", "--config", "cfg.json", "--out", "prior.ckpt", "--log", "train.csv"]);
    ok(dir, &["pnp", "--proj", "sim/input.json", "--prior", "prior.ckpt", "--out", "pnp.json", "--trace", "trace.json"]);
    fs::write(
        dir.join("regions.json"),
        r#"{"z_lo": 27, "z_hi": 36, "background": {"x0": 2, "y0": 2, "w": 8, "h": 8}, "material": {"x0": 28, "y0": 28, "w": 8, "h": 8}}"#,
    )
    .unwrap();
    ok(dir, &["eval", "--recon", "pnp.json", "--ref", "sim/phantom.json", "--report", "eval.json", "--regions", "regions.json"]);
    ok(dir, &["detect", "--recon", "pnp.json", "--truth", "sim/truth.json", "--report", "detect.json"]);
    ok(dir, &["slice-dump", "--vol", "pnp.json", "--z", "32", "--out", "slice.pgm"]);

    let eval: Value = serde_json::from_slice(&fs::read(dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["nrmse"].as_f64().unwrap() > 0.0);
    assert!(eval["snr_db"].as_f64().is_some() && eval["cnr"].as_f64().is_some());
    assert_eq!(fs::read_to_string(dir.join("eval.profile.csv")).unwrap().lines().count(), 65);
    assert!(fs::read_to_string(dir.join("detect.csv")).unwrap().starts_with("bin_lo_mm,"));
    let trace: Value = serde_json::from_slice(&fs::read(dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["denoiser_calls"], 3);
    assert_eq!(trace["selections"], 3);
    let pgm = fs::read(dir.join("slice.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n65535\n"));
    assert_eq!(pgm.len(), 15 + 2 * 64 * 64);
    let side: Value = serde_json::from_slice(&fs::read(dir.join("slice.pgm.json")).unwrap()).unwrap();
    assert!(side["window_max"].as_f64() > side["window_min"].as_f64());
    assert_eq!(fs::read_to_string(dir.join("train.csv")).unwrap().lines().count(), 4);

    let m = manifest(dir);
    let runs = m["runs"].as_object().unwrap();
    for name in ["fdk", "train-prior", "pnp", "eval", "detect", "slice-dump"] {
        assert!(runs.contains_key(name), "{name}");
    }
    let sim = manifest(&dir.join("sim"));
    assert_eq!(sim["runs"]["simulate"]["seeds"]["noise"], 0);
    assert_eq!(sim["runs"]["simulate"]["config"]["pnp"]["K"], 3);
    for a in sim["runs"]["simulate"]["artifacts"].as_array().unwrap() {
        let bytes = fs::read(dir.join("sim").join(a["path"].as_str().unwrap())).unwrap();
        let digest = sha2_hex(&bytes);
        assert_eq!(a["sha256"].as_str().unwrap(), digest);
    }
}

fn sha2_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn single_thread_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        small_config(d, 2);
        reconstruct(d, Some("1"));
    }
    let files = [
        "sim/input.json", "sim/input.raw", "sim/reference.raw", "sim/phantom.raw", "sim/truth.json",
        "input_fdk.raw", "reference_fdk.raw", "prior.ckpt", "train.csv", "pnp.json", "pnp.raw",
    ];
    for f in files {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let trace = |d: &Path| strip_timing(serde_json::from_slice(&fs::read(d.join("trace.json")).unwrap()).unwrap());
    assert_eq!(trace(a.path()), trace(b.path()));
    assert_eq!(manifest(&a.path().join("sim")), manifest(&b.path().join("sim")));
}

#[test]
fn two_dimensional_prior_pipeline() {
    let d = tempfile::tempdir().unwrap();
    small_config(d.path(), 0);
    reconstruct(d.path(), None);
    let trace: Value = serde_json::from_slice(&fs::read(d.path().join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["denoiser_calls"], 2);
}

#[test]
fn missing_proj_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["pnp", "--prior", "w", "--out", "v.json", "--trace", "t.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--proj") && err.contains("Usage"), "{err}");
    assert!(!d.path().join("run_manifest.json").exists());
}

#[test]
fn error_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    assert_eq!(run(dir, &["fdk", "--proj", "missing.json", "--out", "x.json"]).status.code(), Some(3));
    fs::write(dir.join("bad.json"), r#"{"pnp": {"k": 3}}"#).unwrap();
    assert_eq!(run(dir, &["simulate", "--config", "bad.json", "--out-dir", "o"]).status.code(), Some(3));
    assert_eq!(run(dir, &["--threads", "0", "simulate", "--out-dir", "o"]).status.code(), Some(2));

    fs::write(dir.join("v.json"), r#"{"dims": [2, 2, 2], "voxel_size_mm": 1.0, "dtype": "f64le", "order": "zyx"}"#).unwrap();
    let mut raw = vec![0u8; 64];
    raw[8..16].copy_from_slice(&f64::INFINITY.to_le_bytes());
    fs::write(dir.join("v.raw"), raw).unwrap();
    let out = run(dir, &["slice-dump", "--vol", "v.json", "--z", "0", "--out", "s.pgm"]);
    assert_eq!(out.status.code(), Some(4));
}
