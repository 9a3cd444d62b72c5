use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lcpnp::{lc_loss, BoundingBox, CameraIntrinsics, CorrespondenceSet, LossConfig, PoseRepresentation, RigidPose};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lcpnp"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lcpnp")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

// Reads the interchange format independently of the binary.
fn load(path: &Path) -> (CorrespondenceSet, RigidPose, BoundingBox) {
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let k = &doc["intrinsics"];
    let f = |v: &Value| v.as_f64().unwrap();
    let intrinsics = CameraIntrinsics::new(f(&k["fx"]), f(&k["fy"]), f(&k["cx"]), f(&k["cy"])).unwrap();
    let pts = doc["points"].as_array().unwrap();
    let x = pts.iter().map(|p| Vector2::from_vec(floats(&p["x"]))).collect();
    let z = pts.iter().map(|p| Vector3::from_vec(floats(&p["z"]))).collect();
    let w = pts.iter().map(|p| Vector2::from_vec(floats(&p["w"]))).collect();
    let pose = &doc["gt_pose"];
    let gt = RigidPose::new(
        Matrix3::from_row_slice(&floats(&pose["rotation"])),
        Vector3::from_vec(floats(&pose["translation"])),
    );
    let corners: Vec<Vector3<f64>> = doc["bbox"].as_array().unwrap().iter().map(|c| Vector3::from_vec(floats(c))).collect();
    let bbox = BoundingBox::from_corners(corners.try_into().unwrap()).unwrap();
    (CorrespondenceSet::new(x, z, w, intrinsics).unwrap(), gt, bbox)
}

#[test]
fn loss_matches_the_library() {
    let path = data("noisy_scene.json");
    let out = json(&run(&["loss", "--input", path.to_str().unwrap()]));
    let (corrs, gt, bbox) = load(&path);
    let lib = lc_loss(&corrs, &gt, &LossConfig::new(PoseRepresentation::corners3d(bbox))).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    assert!(close(out["l_lc"].as_f64().unwrap(), lib.l_lc));
    assert!(close(out["e_cov"].as_f64().unwrap(), lib.e_cov));
    assert!(close(out["e_prior"].as_f64().unwrap(), lib.e_prior));
    assert!(close(out["e_linear"].as_f64().unwrap(), lib.e_linear));
    for (a, b) in floats(&out["grad_x"]).iter().zip(lib.grad_x.iter()) {
        assert!(close(*a, *b));
    }
    for (a, b) in floats(&out["grad_w"]).iter().zip(lib.grad_w.iter()) {
        assert!(close(*a, *b));
    }
}

#[test]
fn solve_recovers_the_clean_scene() {
    let out = json(&run(&["solve", "-i", data("clean_scene.json").to_str().unwrap()]));
    assert!(out["trans_err"].as_f64().unwrap() < 1e-8);
    assert!(out["rot_err_deg"].as_f64().unwrap() < 1e-8);
    assert_eq!(out["inliers"].as_u64().unwrap(), 32);
    let from_gt = json(&run(&["solve", "-i", data("clean_scene.json").to_str().unwrap(), "--set", "init=gt"]));
    assert!(from_gt["trans_err"].as_f64().unwrap() < 1e-8);
    assert!(from_gt["inliers"].is_null());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "--bogus"]).status.code(), Some(2));
    let noisy = data("noisy_scene.json");
    let out = run(&["loss", "-i", noisy.to_str().unwrap(), "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert_eq!(run(&["loss", "-i", noisy.to_str().unwrap(), "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn computation_errors_exit_with_one() {
    let out = run(&["mc-cov", "-i", data("noisy_scene.json").to_str().unwrap(), "--set", "samples=0"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("at least 2 samples"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn invalid_documents_fail_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = std::fs::read_to_string(data("noisy_scene.json")).unwrap().replacen("\"points\"", "\"extra\": 1, \"points\"", 1);
    std::fs::write(&bad, text).unwrap();
    let target = dir.path().join("out.json");
    let out = run(&["loss", "-i", bad.to_str().unwrap(), "-o", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!target.exists());

    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(data("noisy_scene.json")).unwrap()).unwrap();
    doc["gt_pose"]["rotation"][0] = Value::from(3.0);
    std::fs::write(&bad, doc.to_string()).unwrap();
    let out = run(&["loss", "-i", bad.to_str().unwrap(), "-o", target.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!target.exists());
}

#[test]
fn simulate_writes_trace_summary_and_scene() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("s.json");
    std::fs::write(&config, r#"{"n_points": 16, "noise_px": 1.5, "steps": 12, "loss": "bpnp"}"#).unwrap();
    let csv = dir.path().join("out.csv");
    let summary = dir.path().join("summary.json");
    let scene = dir.path().join("scene.json");
    let out = run(&[
        "simulate",
        "--seed",
        "1",
        "--config",
        config.to_str().unwrap(),
        "-o",
        csv.to_str().unwrap(),
        "--summary",
        summary.to_str().unwrap(),
        "--scene-out",
        scene.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss,correctness,rot_err_deg,trans_err,add"));
    assert_eq!(lines.count(), 13);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(s["loss"], "bpnp");
    assert_eq!(s["seed"], 1);
    let (corrs, _, _) = load(&scene);
    assert_eq!(corrs.len(), 16);
    // overrides beat the config file
    let out = run(&["simulate", "--config", config.to_str().unwrap(), "--set", "steps=2"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
}

#[test]
fn correctness_separates_the_losses() {
    let path = data("noisy_scene.json");
    let lc = json(&run(&["correctness", "-i", path.to_str().unwrap()]));
    assert_eq!(lc["correctness"].as_f64().unwrap(), 1.0);
    let bp = json(&run(&["correctness", "-i", path.to_str().unwrap(), "--set", "loss=bpnp"]));
    assert!(bp["correctness"].as_f64().unwrap() < 0.9);
}

#[test]
fn encode_and_demo_outputs() {
    let out = json(&run(&["encode", "-i", data("clean_scene.json").to_str().unwrap(), "--set", "bits=7"]));
    let bits: Vec<u64> = out["bits"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).collect();
    assert_eq!(bits[0], 7);
    let codes = out["codes"].as_array().unwrap();
    assert_eq!(codes.len(), 32);
    for (code, n) in codes[0].as_array().unwrap().iter().zip(&bits) {
        assert_eq!(code.as_str().unwrap().len() as u64, *n);
    }
    let demo = json(&run(&["demo-averaging"]));
    assert_eq!(demo["correct"], serde_json::json!([false, true]));
    let sweep = json(&run(&["demo-averaging", "--set", "trials=500", "--seed", "4"]));
    assert_eq!(sweep["exactly_one_incorrect"], 500);
}

#[test]
fn mc_cov_reports_both_matrices() {
    let out = json(&run(&["mc-cov", "-i", data("clean_scene.json").to_str().unwrap(), "--set", "samples=3000"]));
    assert_eq!(out["used"], 3000);
    assert!(out["relative_frobenius"].as_f64().unwrap() < 0.15);
    assert_eq!(out["analytic"].as_array().unwrap().len(), 6);
}
