use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{ate, out_of_plane_drift, rpe};
use super::pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
use super::{fmt_g9, Trajectory};
use crate::error::{Error, Result};
use crate::liegroup::{adjoint, log_se3, Pose, Twist};
use crate::simkit::{generate_scene, GroundTruth, SceneConfig};
use crate::worldmodel::ClusterId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub id: ClusterId,
    pub class_label: String,
    pub frames: usize,
    pub ate_m: f64,
    pub rpe_t: f64,
    pub rpe_r_deg: f64,
    /// Out-of-plane drift against the estimated joint plane.
    pub drift_m: f64,
    /// Largest per-frame norm of the joint-frame twist error.
    pub twist_error_max: f64,
    pub twist_error_mean: f64,
    pub mean_speed_kmh: f64,
    pub gt_mean_speed_kmh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub frames: usize,
    pub constrained: bool,
    pub camera_ate_m: f64,
    pub camera_rpe_t: f64,
    pub camera_rpe_r_deg: f64,
    pub objects: Vec<ObjectMetrics>,
    pub ba_runs: usize,
    pub runtime_s: f64,
}

impl ExperimentReport {
    /// `key: value` lines. Runtime is left out so that reports of the same
    /// seed compare byte for byte.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        kv("seed", self.seed.to_string());
        kv("frames", self.frames.to_string());
        kv("constrained", self.constrained.to_string());
        kv("ba_runs", self.ba_runs.to_string());
        kv("camera_ate_m", fmt_g9(self.camera_ate_m));
        kv("camera_rpe_t_m_per_frame", fmt_g9(self.camera_rpe_t));
        kv("camera_rpe_r_deg_per_frame", fmt_g9(self.camera_rpe_r_deg));
        for o in &self.objects {
            let p = format!("object_{}", o.id);
            kv(&format!("{p}_class"), o.class_label.clone());
            kv(&format!("{p}_frames"), o.frames.to_string());
            kv(&format!("{p}_ate_m"), fmt_g9(o.ate_m));
            kv(&format!("{p}_rpe_t_m_per_frame"), fmt_g9(o.rpe_t));
            kv(&format!("{p}_rpe_r_deg_per_frame"), fmt_g9(o.rpe_r_deg));
            kv(&format!("{p}_drift_m"), fmt_g9(o.drift_m));
            kv(&format!("{p}_twist_error_max"), fmt_g9(o.twist_error_max));
            kv(&format!("{p}_twist_error_mean"), fmt_g9(o.twist_error_mean));
            kv(&format!("{p}_mean_speed_kmh"), fmt_g9(o.mean_speed_kmh));
            kv(&format!("{p}_gt_mean_speed_kmh"), fmt_g9(o.gt_mean_speed_kmh));
        }
        s
    }

    pub fn object(&self, id: ClusterId) -> Option<&ObjectMetrics> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Per-frame rows of one object: frame, joint-frame twist, speed.
type TwistRows = Vec<(usize, Twist, f64)>;

struct ObjectEval {
    metrics: ObjectMetrics,
    est: Trajectory,
    gt: Trajectory,
    est_rows: TwistRows,
    gt_rows: TwistRows,
}

struct Evaluation {
    report: ExperimentReport,
    camera_est: Trajectory,
    camera_gt: Trajectory,
    camera_rows: Vec<(usize, f64, f64, f64)>,
    objects: Vec<ObjectEval>,
}

fn trajectory(gt: &GroundTruth, poses: &BTreeMap<usize, Pose>) -> Result<Trajectory> {
    Trajectory::new(poses.iter().map(|(k, p)| (gt.frames[*k].timestamp, *p)).collect())
}

fn speed_kmh(a: &Pose, b: &Pose, frame_rate: f64) -> f64 {
    (b.translation - a.translation).norm() * frame_rate * 3.6
}

fn twist_rows(poses: &BTreeMap<usize, Pose>, joint_frame: &Pose, frame_rate: f64) -> Result<TwistRows> {
    let to_joint = adjoint(&joint_frame.inverse());
    let seq: Vec<(&usize, &Pose)> = poses.iter().collect();
    seq.windows(2)
        .map(|w| {
            let xi = log_se3(&w[1].1.compose(&w[0].1.inverse()))?;
            Ok((*w[1].0, to_joint.apply(&xi), speed_kmh(w[0].1, w[1].1, frame_rate)))
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn evaluate_full(gt: &GroundTruth, scene: &SceneConfig, cfg: &PipelineConfig, out: &PipelineOutput) -> Result<Evaluation> {
    let camera_est = trajectory(gt, &out.camera)?;
    let gt_cam: BTreeMap<usize, Pose> = out.camera.keys().map(|&k| (k, gt.frames[k].t_wc)).collect();
    let camera_gt = trajectory(gt, &gt_cam)?;
    let camera_ate_m = ate(&camera_est, &camera_gt)?;
    let (camera_rpe_t, camera_rpe_r_deg) = rpe(&camera_est, &camera_gt, 1)?;
    let camera_rows = out
        .camera
        .iter()
        .map(|(&k, est)| {
            let g = &gt.frames[k].t_wc;
            let err = g.inverse().compose(est);
            (k, (est.translation - g.translation).norm(), super::geodesic_angle(&err.rotation).to_degrees(), gt.frames[k].timestamp)
        })
        .collect();

    let mut objects = Vec::new();
    for (&id, poses) in &out.objects {
        if poses.len() < 3 {
            continue;
        }
        let (&k0, est0) = poses.iter().next().expect("nonempty");
        let Some(gt0) = gt.frames[k0].object_poses.get(&id) else { continue };
        // Ground truth re-expressed with the estimate's object-frame choice.
        let anchor = gt0.inverse().compose(est0);
        let mut anchored = BTreeMap::new();
        for &k in poses.keys() {
            let Some(g) = gt.frames[k].object_poses.get(&id) else {
                return Err(Error::Parse(format!("object {id} has no ground truth at frame {k}")));
            };
            anchored.insert(k, g.compose(&anchor));
        }
        let est = trajectory(gt, poses)?;
        let gtt = trajectory(gt, &anchored)?;
        let jf = gt.clusters.get(&id).and_then(|c| c.joint_frame).unwrap_or_default();
        let est_rows = twist_rows(poses, &jf, scene.frame_rate)?;
        let gt_rows = twist_rows(&anchored, &jf, scene.frame_rate)?;
        let errs: Vec<f64> = est_rows
            .iter()
            .zip(&gt_rows)
            .map(|(a, b)| (a.1.to_vector() - b.1.to_vector()).norm())
            .collect();
        let drift_m = out.joints.get(&id).map(|j| out_of_plane_drift(&est, &j.plane())).unwrap_or(0.0);
        let (rpe_t, rpe_r_deg) = rpe(&est, &gtt, 1)?;
        objects.push(ObjectEval {
            metrics: ObjectMetrics {
                id,
                class_label: out.class_labels.get(&id).cloned().unwrap_or_default(),
                frames: poses.len(),
                ate_m: ate(&est, &gtt)?,
                rpe_t,
                rpe_r_deg,
                drift_m,
                twist_error_max: errs.iter().copied().fold(0.0, f64::max),
                twist_error_mean: mean(errs.iter().copied()),
                mean_speed_kmh: mean(est_rows.iter().map(|r| r.2)),
                gt_mean_speed_kmh: mean(gt_rows.iter().map(|r| r.2)),
            },
            est,
            gt: gtt,
            est_rows,
            gt_rows,
        });
    }

    let report = ExperimentReport {
        seed: scene.seed,
        frames: gt.frames.len(),
        constrained: cfg.constrained,
        camera_ate_m,
        camera_rpe_t,
        camera_rpe_r_deg,
        objects: objects.iter().map(|o| o.metrics.clone()).collect(),
        ba_runs: out.ba_runs,
        runtime_s: 0.0,
    };
    Ok(Evaluation {
        report,
        camera_est,
        camera_gt,
        camera_rows,
        objects,
    })
}

/// Metrics of a finished run against its ground truth.
pub fn evaluate(gt: &GroundTruth, scene: &SceneConfig, cfg: &PipelineConfig, out: &PipelineOutput) -> Result<ExperimentReport> {
    Ok(evaluate_full(gt, scene, cfg, out)?.report)
}

fn twist_csv(rows: &TwistRows) -> String {
    let mut s = String::from("frame,v_x,v_y,v_z,w_x,w_y,w_z,speed_kmh\n");
    for (k, xi, speed) in rows {
        let x = xi.to_vector();
        let vals: Vec<String> = x.iter().map(|v| fmt_g9(*v)).collect();
        let _ = writeln!(s, "{k},{},{}", vals.join(","), fmt_g9(*speed));
    }
    s
}

fn write_evaluation(ev: &Evaluation, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ev.camera_est.save(&dir.join("camera_est.txt"))?;
    ev.camera_gt.save(&dir.join("camera_gt.txt"))?;
    for o in &ev.objects {
        o.est.save(&dir.join(format!("object_{}_est.txt", o.metrics.id)))?;
        o.gt.save(&dir.join(format!("object_{}_gt.txt", o.metrics.id)))?;
    }
    std::fs::write(dir.join("report.txt"), ev.report.to_text())?;
    std::fs::write(dir.join("runtime.txt"), format!("runtime_s: {}\n", fmt_g9(ev.report.runtime_s)))?;
    if cfg.csv {
        let mut s = String::from("frame,timestamp,trans_error_m,rot_error_deg\n");
        for (k, t, r, ts) in &ev.camera_rows {
            let _ = writeln!(s, "{k},{},{},{}", fmt_g9(*ts), fmt_g9(*t), fmt_g9(*r));
        }
        std::fs::write(dir.join("camera_metrics.csv"), s)?;
        for o in &ev.objects {
            std::fs::write(dir.join(format!("object_{}_twists.csv", o.metrics.id)), twist_csv(&o.est_rows))?;
            std::fs::write(dir.join(format!("object_{}_twists_gt.csv", o.metrics.id)), twist_csv(&o.gt_rows))?;
        }
    }
    Ok(())
}

/// Simulates, runs the pipeline and evaluates; writes files when `out` is given.
pub fn run_experiment(scene: &SceneConfig, cfg: &PipelineConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let start = Instant::now();
    scene.validate()?;
    let gt = generate_scene(scene)?;
    let result = run_pipeline(&gt, scene, cfg)?;
    let mut ev = evaluate_full(&gt, scene, cfg, &result)?;
    ev.report.runtime_s = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_evaluation(&ev, cfg, dir)?;
    }
    Ok(ev.report)
}

/// Writes trajectories, report and tables of a finished run.
pub fn write_outputs(
    gt: &GroundTruth,
    scene: &SceneConfig,
    cfg: &PipelineConfig,
    out: &PipelineOutput,
    dir: &Path,
) -> Result<ExperimentReport> {
    let ev = evaluate_full(gt, scene, cfg, out)?;
    write_evaluation(&ev, cfg, dir)?;
    Ok(ev.report)
}

/// [`run_experiment`] with configs read from files; a missing path means defaults.
pub fn run_experiment_files(scene: Option<&Path>, config: Option<&Path>, out: &Path) -> Result<ExperimentReport> {
    let scene = match scene {
        Some(p) => SceneConfig::load(p)?,
        None => SceneConfig::default(),
    };
    let cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    run_experiment(&scene, &cfg, Some(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelftestLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick end-to-end checks: group round trips, projector properties and a
/// short noiseless run.
pub fn selftest() -> Vec<SelftestLine> {
    use crate::joints::{freedom_basis, projector, JointType};
    use crate::liegroup::exp_se3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut lines = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a: [f64; 6] = std::array::from_fn(|i| rng.random_range(-1.0..1.0) * if i < 3 { 5.0 } else { 1.5 });
        let xi = Twist::from_array(a);
        let back = log_se3(&exp_se3(&xi)).map(|x| (x.to_vector() - xi.to_vector()).norm());
        worst = worst.max(back.unwrap_or(f64::INFINITY));
    }
    lines.push(SelftestLine {
        name: "exp_log_roundtrip",
        passed: worst < 1e-9,
        detail: format!("max error {}", fmt_g9(worst)),
    });

    let mut worst = 0.0f64;
    for jt in JointType::ALL {
        match projector(&freedom_basis(jt)) {
            Ok(p) => worst = worst.max((p * p - p).norm()).max((p - p.transpose()).norm()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    lines.push(SelftestLine {
        name: "projector_idempotent",
        passed: worst < 1e-10,
        detail: format!("max defect {}", fmt_g9(worst)),
    });

    let scene = SceneConfig {
        n_frames: 12,
        ..SceneConfig::noiseless()
    };
    let run = run_experiment(&scene, &PipelineConfig::default(), None);
    let (passed, detail) = match run {
        Ok(r) => {
            let obj = r.objects.iter().map(|o| o.ate_m).fold(0.0, f64::max);
            (
                r.camera_ate_m < 1e-6 && obj < 1e-5,
                format!("camera ATE {} m, worst object ATE {} m", fmt_g9(r.camera_ate_m), fmt_g9(obj)),
            )
        }
        Err(e) => (false, e.to_string()),
    };
    lines.push(SelftestLine {
        name: "noiseless_run",
        passed,
        detail,
    });
    lines
}
