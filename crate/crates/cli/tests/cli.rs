use std::path::Path;
use std::process::{Command, Output};

fn dynslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynslam")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

fn short_scene(dir: &Path, frames: usize) -> String {
    let path = dir.join("scene.toml");
    let scene = dynslam::simkit::SceneConfig {
        n_frames: frames,
        ..Default::default()
    };
    std::fs::write(&path, scene.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let scene = short_scene(dir.path(), 5);
    let out = dir.path().join("sim");
    let o = dynslam(&["simulate", "--scene", &scene, "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cam = std::fs::read_to_string(out.join("camera_gt.txt")).unwrap();
    assert_eq!(cam.lines().count(), 5);
    let obs = std::fs::read_to_string(out.join("observations.csv")).unwrap();
    assert!(obs.starts_with("frame,point_id,cluster_id,u,v,disparity\n"));
    assert!(obs.lines().count() > 100);
    assert!(std::fs::read_to_string(out.join("scene.toml")).unwrap().contains("seed = 4"));
}

#[test]
fn run_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let scene = short_scene(dir.path(), 12);
    let out = dir.path().join("run");
    let o = dynslam(&["run", "--scene", &scene, "--out", out.to_str().unwrap(), "--csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);
    assert_eq!(value(&report, "frames"), 12.0);
    assert!(out.join("camera_metrics.csv").exists());

    let est = out.join("camera_est.txt");
    let gt = out.join("camera_gt.txt");
    let e = dynslam(&["eval", "--est", est.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert!(e.status.success());
    let ev = stdout(&e);
    assert!((value(&ev, "ate_m") - value(&report, "camera_ate_m")).abs() < 1e-6);
    assert!((value(&ev, "rpe_t_m_per_frame") - value(&report, "camera_rpe_t_m_per_frame")).abs() < 1e-6);
}

#[test]
fn eval_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    std::fs::write(&path, "0 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n0.2 2 0.5 0 0 0 0 1\n").unwrap();
    let p = path.to_str().unwrap();
    let o = dynslam(&["eval", "--est", p, "--gt", p, "--per-meter"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(value(&text, "ate_m") < 1e-12);
    assert!(value(&text, "rpe_t_m_per_m") < 1e-12);
}

#[test]
fn missing_file_fails() {
    let o = dynslam(&["eval", "--est", "/nonexistent/a.txt", "--gt", "/nonexistent/b.txt"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn selftest_passes() {
    let o = dynslam(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}
