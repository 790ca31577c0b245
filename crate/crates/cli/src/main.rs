use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dynslam::evalcli::{
    ate, fmt_g9, rpe_with, run_experiment, selftest, PipelineConfig, RpeMode, Trajectory,
};
use dynslam::simkit::{generate_scene, render_observations, SceneConfig};

#[derive(Parser)]
#[command(name = "dynslam", version, about = "Joint-constrained dynamic stereo SLAM on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene and write its ground truth and observations.
    Simulate {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate, track, refine and evaluate.
    Run {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the joint table (true) or free joints everywhere (false).
        #[arg(long)]
        constrained: Option<bool>,
        /// Write per-frame CSV tables.
        #[arg(long)]
        csv: bool,
    },
    /// Compare two trajectory files.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// RPE interval in frames.
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Normalize RPE by ground-truth distance instead of frames.
        #[arg(long)]
        per_meter: bool,
    },
    /// Run the built-in checks.
    Selftest,
}

fn load_scene(path: Option<&Path>, seed: Option<u64>) -> Result<SceneConfig> {
    let mut scene = match path {
        Some(p) => SceneConfig::load(p).with_context(|| format!("reading scene {}", p.display()))?,
        None => SceneConfig::default(),
    };
    if let Some(s) = seed {
        scene.seed = s;
    }
    Ok(scene)
}

fn simulate(scene: &SceneConfig, out: &Path) -> Result<()> {
    let gt = generate_scene(scene)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scene.toml"), scene.to_toml())?;
    let cam = Trajectory::new(gt.frames.iter().map(|f| (f.timestamp, f.t_wc)).collect())?;
    cam.save(&out.join("camera_gt.txt"))?;
    for id in gt.clusters.values().filter(|c| !c.is_static).map(|c| c.id) {
        let traj = Trajectory::new(
            gt.frames
                .iter()
                .filter_map(|f| f.object_poses.get(&id).map(|p| (f.timestamp, *p)))
                .collect(),
        )?;
        traj.save(&out.join(format!("object_{id}_gt.txt")))?;
    }
    let mut obs = String::from("frame,point_id,cluster_id,u,v,disparity\n");
    for f in 0..gt.frames.len() {
        for o in render_observations(&gt, f, scene) {
            let _ = writeln!(
                obs,
                "{},{},{},{},{},{}",
                f,
                o.point_id,
                o.cluster_id,
                fmt_g9(o.u),
                fmt_g9(o.v),
                fmt_g9(o.disparity)
            );
        }
    }
    std::fs::write(out.join("observations.csv"), obs)?;
    println!("wrote {} frames to {}", gt.frames.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { scene, out, seed } => {
            simulate(&load_scene(scene.as_deref(), seed)?, &out)?;
        }
        Command::Run {
            scene,
            config,
            out,
            seed,
            constrained,
            csv,
        } => {
            let scene = load_scene(scene.as_deref(), seed)?;
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p).with_context(|| format!("reading config {}", p.display()))?,
                None => PipelineConfig::default(),
            };
            if let Some(c) = constrained {
                cfg.constrained = c;
            }
            cfg.csv |= csv;
            let report = run_experiment(&scene, &cfg, Some(&out))?;
            print!("{}", report.to_text());
            println!("runtime_s: {}", fmt_g9(report.runtime_s));
        }
        Command::Eval {
            est,
            gt,
            delta,
            per_meter,
        } => {
            let e = Trajectory::load(&est).with_context(|| format!("reading {}", est.display()))?;
            let g = Trajectory::load(&gt).with_context(|| format!("reading {}", gt.display()))?;
            let mode = if per_meter { RpeMode::PerMeter } else { RpeMode::PerFrame };
            let (t, r) = rpe_with(&e, &g, delta, mode)?;
            let unit = if per_meter { "m" } else { "frame" };
            println!("ate_m: {}", fmt_g9(ate(&e, &g)?));
            println!("rpe_t_m_per_{unit}: {}", fmt_g9(t));
            println!("rpe_r_deg_per_{unit}: {}", fmt_g9(r));
        }
        Command::Selftest => {
            let lines = selftest();
            for l in &lines {
                println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
            }
            return Ok(lines.iter().all(|l| l.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
