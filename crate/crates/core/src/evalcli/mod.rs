//! Trajectory metrics, experiment orchestration and file formats.

mod experiment;
mod metrics;
mod pipeline;

pub use experiment::{
    evaluate, run_experiment, run_experiment_files, selftest, write_outputs, ExperimentReport, ObjectMetrics,
    SelftestLine,
};
pub use metrics::{
    align_rigid, associate_timestamps, ate, geodesic_angle, ate_with_tolerance, out_of_plane_drift, rpe, rpe_with, RpeMode,
};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};

use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::liegroup::Pose;

/// Timestamped poses with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        let mut t = Self::default();
        for (ts, p) in entries {
            t.push(ts, p)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<()> {
        if !timestamp.is_finite() {
            return Err(Error::Parse(format!("non-finite timestamp {timestamp}")));
        }
        if let Some((last, _)) = self.entries.last() {
            if timestamp <= *last {
                return Err(Error::Parse(format!(
                    "timestamps must increase: {timestamp} after {last}"
                )));
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies `f` to every pose, keeping timestamps.
    pub fn map_poses(&self, f: impl Fn(&Pose) -> Pose) -> Self {
        Self {
            entries: self.entries.iter().map(|(t, p)| (*t, f(p))).collect(),
        }
    }

    /// `timestamp tx ty tz qx qy qz qw`, one pose per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (ts, p) in &self.entries {
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation));
            let q = q.quaternion();
            let vals = [ts, &p.translation.x, &p.translation.y, &p.translation.z, &q.i, &q.j, &q.k, &q.w];
            let line: Vec<String> = vals.iter().map(|v| fmt_g9(**v)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut t = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
            if vals.len() != 8 {
                return Err(Error::Parse(format!(
                    "line {}: expected 8 values, got {}",
                    n + 1,
                    vals.len()
                )));
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if q.norm() < 1e-12 {
                return Err(Error::Parse(format!("line {}: zero quaternion", n + 1)));
            }
            let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
            t.push(vals[0], Pose::new(r, Vector3::new(vals[1], vals[2], vals[3])))
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// C-style `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    fmt_g(x, 9)
}

fn fmt_g(x: f64, precision: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let p = precision.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
