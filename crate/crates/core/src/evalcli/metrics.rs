use nalgebra::{Matrix3, Vector3};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::liegroup::Pose;
use crate::scenegeom::PlaneModel;

/// Pairs `(est index, gt index)` by nearest ground-truth timestamp within
/// `tol` seconds. Each ground-truth entry is used at most once.
pub fn associate_timestamps(est: &Trajectory, gt: &Trajectory, tol: f64) -> Vec<(usize, usize)> {
    let g = gt.entries();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, (t, _)) in est.entries().iter().enumerate() {
        let k = g.partition_point(|(tg, _)| tg < t);
        let best = [k.checked_sub(1), (k < g.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (g[a].0 - t).abs().total_cmp(&(g[b].0 - t).abs()));
        if let Some(j) = best {
            let taken = out.last().is_some_and(|&(_, lj)| lj >= j);
            if (g[j].0 - t).abs() <= tol && !taken {
                out.push((i, j));
            }
        }
    }
    out
}

/// `arccos((trace(R) - 1) / 2)` with the argument clamped to `[-1, 1]`.
pub fn geodesic_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Half the median ground-truth sampling period.
fn default_tolerance(gt: &Trajectory) -> f64 {
    let mut d: Vec<f64> = gt.entries().windows(2).map(|w| w[1].0 - w[0].0).collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    0.5 * d[d.len() / 2]
}

/// Rigid `(R, t)` minimizing `sum |R a_i + t - b_i|^2`.
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Pose {
    let n = a.len().max(1) as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += (y - cb) * (x - ca).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Pose::new(r, cb - r * ca)
}

/// Translation RMSE after a single best rigid alignment, associating
/// timestamps within half a ground-truth period.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ate_with_tolerance(est, gt, default_tolerance(gt))
}

pub fn ate_with_tolerance(est: &Trajectory, gt: &Trajectory, tol: f64) -> Result<f64> {
    let pairs = associate_timestamps(est, gt, tol);
    if pairs.len() < 2 {
        return Err(Error::NoOverlap);
    }
    let a: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est.entries()[i].1.translation).collect();
    let b: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt.entries()[j].1.translation).collect();
    let s = align_rigid(&a, &b);
    let sq: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (s.transform_point(x) - y).norm_squared())
        .sum();
    Ok((sq / a.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RpeMode {
    /// Meters and degrees per frame of the interval.
    PerFrame,
    /// Meters and degrees per meter of ground-truth path over the interval.
    PerMeter,
}

/// Relative pose error with `delta` frames, per frame.
pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<(f64, f64)> {
    rpe_with(est, gt, delta, RpeMode::PerFrame)
}

/// RMSE over `i` of the translation norm and geodesic angle (degrees) of
/// `(gt_i^-1 gt_{i+d})^-1 (est_i^-1 est_{i+d})`, normalized per `mode`.
pub fn rpe_with(est: &Trajectory, gt: &Trajectory, delta: usize, mode: RpeMode) -> Result<(f64, f64)> {
    let delta = delta.max(1);
    let pairs = associate_timestamps(est, gt, default_tolerance(gt));
    if pairs.len() < delta + 1 {
        return Err(Error::NoOverlap);
    }
    let e = est.entries();
    let g = gt.entries();
    let (mut st, mut sr, mut n) = (0.0, 0.0, 0usize);
    for w in 0..pairs.len() - delta {
        let (i0, j0) = pairs[w];
        let (i1, j1) = pairs[w + delta];
        let rel_g = g[j0].1.inverse().compose(&g[j1].1);
        let rel_e = e[i0].1.inverse().compose(&e[i1].1);
        let err = rel_g.inverse().compose(&rel_e);
        let norm = match mode {
            RpeMode::PerFrame => delta as f64,
            RpeMode::PerMeter => {
                let path: f64 = (w..w + delta)
                    .map(|k| (g[pairs[k + 1].1].1.translation - g[pairs[k].1].1.translation).norm())
                    .sum();
                if path <= 0.0 {
                    continue;
                }
                path
            }
        };
        let t = err.translation.norm() / norm;
        let r = geodesic_angle(&err.rotation).to_degrees() / norm;
        st += t * t;
        sr += r * r;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(((st / n as f64).sqrt(), (sr / n as f64).sqrt()))
}

/// Largest change of the origin's signed distance to `plane` relative to the
/// first pose.
pub fn out_of_plane_drift(traj: &Trajectory, plane: &PlaneModel) -> f64 {
    let Some((_, first)) = traj.entries().first() else {
        return 0.0;
    };
    let d0 = plane.signed_distance(&first.translation);
    traj.entries()
        .iter()
        .map(|(_, p)| (plane.signed_distance(&p.translation) - d0).abs())
        .fold(0.0, f64::max)
}
