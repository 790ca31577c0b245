//! Frame-to-frame estimators.
//!
//! Camera poses are tracked against static map points; object twists are
//! tracked against object-frame points under the joint constraint. Both use
//! Levenberg-Marquardt on a Huber-robustified reprojection cost with a MAD
//! scale estimate.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3x6, Matrix6, SMatrix, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joints::JointSpec;
use crate::liegroup::{
    dexp_block, exp_se3, left_rotation_operator, point_operator, right_mul_operator,
    se3_left_jacobian, skew, Pose, Twist,
};
use crate::scenegeom::{PinholeCamera, StereoObservation};
use crate::worldmodel::{PointId, WorldMap};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Minimum matches for an object twist solve; below it the track coasts.
pub const MIN_OBJECT_MATCHES: usize = 3;
/// Minimum static matches for a camera solve.
pub const MIN_CAMERA_MATCHES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustConfig {
    /// Huber threshold on the raw pixel residual norm.
    pub huber_delta: f64,
    pub mad_scale: f64,
    pub sigma_floor: f64,
    pub max_lm_iters: usize,
    pub lm_lambda_init: f64,
    pub convergence_tol: f64,
    /// After convergence, residuals beyond this many MAD sigmas are dropped
    /// and the solve is repeated; 0 disables gating.
    pub outlier_gate: f64,
    pub gate_rounds: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            huber_delta: 2.0,
            mad_scale: 1.4826,
            sigma_floor: 0.05,
            max_lm_iters: 30,
            lm_lambda_init: 1e-4,
            convergence_tol: 1e-8,
            outlier_gate: 4.0,
            gate_rounds: 2,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if self.huber_delta > 0.0 && self.sigma_floor > 0.0 && self.max_lm_iters > 0 && self.outlier_gate >= 0.0 {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(
                "huber_delta, sigma_floor and max_lm_iters must be positive, outlier_gate non-negative".into(),
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult<T> {
    pub estimate: T,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub inlier_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Propagated by the constant-velocity model instead of solved.
    pub coasted: bool,
    /// MAD scale of the final residuals, in pixels.
    pub sigma: f64,
}

/// Object twist estimate. `twist = B coords`, with `B` the world-frame joint basis.
#[derive(Clone, Debug, PartialEq)]
pub struct TwistEstimate {
    pub twist: Twist,
    pub coords: DVector<f64>,
    /// `exp(twist) * T_prev`.
    pub pose: Pose,
}

/// A map point matched to a pixel in the current frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMatch {
    pub point_id: PointId,
    pub pixel: Vector2<f64>,
}

/// Huber cost and IRLS weight for a squared residual norm.
pub fn huber_rho(r2: f64, delta: f64) -> (f64, f64) {
    let r = r2.sqrt();
    if r <= delta {
        (r2, 1.0)
    } else {
        (2.0 * delta * r - delta * delta, delta / r)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust standard deviation: `max(scale * MAD, floor)`.
pub fn mad_sigma(residuals: &[f64], cfg: &RobustConfig) -> f64 {
    if residuals.is_empty() {
        return cfg.sigma_floor;
    }
    let mut r = residuals.to_vec();
    let m = median(&mut r);
    let mut dev: Vec<f64> = residuals.iter().map(|x| (x - m).abs()).collect();
    (cfg.mad_scale * median(&mut dev)).max(cfg.sigma_floor)
}

type Linearization = Vec<Option<(DVector<f64>, DMatrix<f64>)>>;

struct LmOutcome<S> {
    x: S,
    initial_cost: f64,
    final_cost: f64,
    iterations: usize,
    converged: bool,
    inlier_count: usize,
    sigma: f64,
}

/// Cost charged to a residual that cannot be evaluated (point behind the camera).
fn invalid_cost(cfg: &RobustConfig) -> f64 {
    let big = 50.0 * cfg.huber_delta;
    huber_rho(big * big, cfg.huber_delta).0
}

fn robust_cost(lin: &Linearization, cfg: &RobustConfig) -> f64 {
    lin.iter()
        .map(|e| match e {
            Some((r, _)) => huber_rho(r.norm_squared(), cfg.huber_delta).0,
            None => invalid_cost(cfg),
        })
        .sum()
}

fn residual_sigma(lin: &Linearization, cfg: &RobustConfig) -> f64 {
    let coords: Vec<f64> = lin
        .iter()
        .flatten()
        .flat_map(|(r, _)| r.iter().copied())
        .collect();
    mad_sigma(&coords, cfg)
}

fn inliers(lin: &Linearization, cfg: &RobustConfig) -> usize {
    lin.iter()
        .flatten()
        .filter(|(r, _)| r.norm() <= cfg.huber_delta)
        .count()
}

/// Huber IRLS solve followed by up to `gate_rounds` re-solves that drop
/// residuals beyond `outlier_gate` MAD sigmas. Huber alone leaves each gross
/// outlier a bounded but nonzero pull.
fn robust_lm<S: Clone>(
    x0: S,
    n: usize,
    cfg: &RobustConfig,
    eval: impl Fn(&S) -> Linearization,
    retract: impl Fn(&S, &DVector<f64>) -> S,
) -> Result<LmOutcome<S>> {
    let mut out = lm_pass(x0, n, cfg, &eval, &retract)?;
    if cfg.outlier_gate <= 0.0 {
        return Ok(out);
    }
    let mut mask: Option<Vec<bool>> = None;
    for _ in 0..cfg.gate_rounds {
        let threshold = cfg.outlier_gate * out.sigma;
        let keep: Vec<bool> = eval(&out.x)
            .iter()
            .map(|e| e.as_ref().is_some_and(|(r, _)| r.norm() <= threshold))
            .collect();
        if mask.as_ref() == Some(&keep) || keep.iter().filter(|k| **k).count() < n.max(MIN_OBJECT_MATCHES) {
            break;
        }
        let masked = |x: &S| -> Linearization {
            eval(x).into_iter().zip(&keep).filter_map(|(e, k)| k.then_some(e)).collect()
        };
        let Ok(next) = lm_pass(out.x.clone(), n, cfg, &masked, &retract) else { break };
        out = LmOutcome {
            initial_cost: out.initial_cost,
            iterations: out.iterations + next.iterations,
            ..next
        };
        mask = Some(keep);
    }
    Ok(out)
}

/// Damped Gauss-Newton with Huber IRLS weights. The MAD scale is recomputed
/// once per iteration; it rescales the whole cost, so it does not change
/// which steps are accepted, and reported costs are in raw pixel units.
fn lm_pass<S: Clone>(
    x0: S,
    n: usize,
    cfg: &RobustConfig,
    eval: &impl Fn(&S) -> Linearization,
    retract: &impl Fn(&S, &DVector<f64>) -> S,
) -> Result<LmOutcome<S>> {
    let mut x = x0;
    let mut lin = eval(&x);
    let mut cost = robust_cost(&lin, cfg);
    let initial_cost = cost;
    let abs_tol = 1e-20 * lin.len().max(1) as f64;
    let mut lambda = cfg.lm_lambda_init;
    let mut iterations = 0;
    let mut converged = false;
    let mut accepted_any = false;

    'outer: while iterations < cfg.max_lm_iters {
        if cost <= abs_tol || n == 0 {
            converged = true;
            break;
        }
        let sigma = residual_sigma(&lin, cfg);
        let inv_s2 = 1.0 / (sigma * sigma);
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for (r, j) in lin.iter().flatten() {
            let w = huber_rho(r.norm_squared(), cfg.huber_delta).1 * inv_s2;
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        if g.amax() < 1e-15 {
            converged = true;
            break;
        }
        loop {
            iterations += 1;
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if iterations >= cfg.max_lm_iters {
                    break 'outer;
                }
                continue;
            };
            let step = -chol.solve(&g);
            let candidate = retract(&x, &step);
            let cand_lin = eval(&candidate);
            let cand_cost = robust_cost(&cand_lin, cfg);
            if cand_cost < cost {
                let rel = (cost - cand_cost) / cost;
                x = candidate;
                lin = cand_lin;
                cost = cand_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted_any = true;
                if rel < cfg.convergence_tol || step.norm() < 1e-14 {
                    converged = true;
                    break 'outer;
                }
                continue 'outer;
            }
            if (cand_cost - cost).abs() <= cfg.convergence_tol * cost || step.norm() < 1e-14 {
                converged = true;
                break 'outer;
            }
            lambda *= 10.0;
            if iterations >= cfg.max_lm_iters {
                break 'outer;
            }
        }
    }
    if !converged && !accepted_any {
        return Err(Error::Diverged { iterations });
    }
    Ok(LmOutcome {
        inlier_count: inliers(&lin, cfg),
        sigma: residual_sigma(&lin, cfg),
        x,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
    })
}

/// Camera pose from matches against static map points.
///
/// Matches whose point is missing or owned by a dynamic cluster are ignored.
/// The increment is applied on the left: `T_cw <- exp(d) T_cw`.
pub fn track_camera(
    matches: &[PixelMatch],
    map: &WorldMap,
    cam: &PinholeCamera,
    init: &Pose,
    cfg: &RobustConfig,
) -> Result<TrackResult<Pose>> {
    let data: Vec<(Vector3<f64>, Vector2<f64>)> = matches
        .iter()
        .filter(|m| map.point_is_static(m.point_id))
        .map(|m| (map.points[&m.point_id].position, m.pixel))
        .collect();
    if data.len() < MIN_CAMERA_MATCHES {
        return Err(Error::InsufficientPoints {
            got: data.len(),
            need: MIN_CAMERA_MATCHES,
        });
    }
    let eval = |t: &Pose| -> Linearization {
        data.iter()
            .map(|(xw, z)| {
                let xc = t.transform_point(xw);
                let dpi = cam.projection_jacobian(&xc).ok()?;
                let r = z - cam.project_camera_point(&xc).ok()?;
                let j = camera_jacobian(&dpi, &xc);
                Some((DVector::from_column_slice(r.as_slice()), DMatrix::from_column_slice(2, 6, j.as_slice())))
            })
            .collect()
    };
    solve_camera(init, cfg, eval)
}

fn solve_camera(init: &Pose, cfg: &RobustConfig, eval: impl Fn(&Pose) -> Linearization) -> Result<TrackResult<Pose>> {
    let retract = |t: &Pose, d: &DVector<f64>| {
        exp_se3(&Twist::from_array([d[0], d[1], d[2], d[3], d[4], d[5]])).compose(t)
    };
    let out = robust_lm(*init, 6, cfg, eval, retract)?;
    Ok(TrackResult {
        estimate: out.x,
        initial_cost: out.initial_cost,
        final_cost: out.final_cost,
        inlier_count: out.inlier_count,
        iterations: out.iterations,
        converged: out.converged,
        coasted: false,
        sigma: out.sigma,
    })
}

/// Inputs shared by the object twist estimators.
#[derive(Clone, Copy, Debug)]
pub struct ObjectTrackInput<'a> {
    pub cam: &'a PinholeCamera,
    /// Current camera pose `T_cw`.
    pub t_cw: &'a Pose,
    /// Object pose in the previous frame, `T_wo`.
    pub prev_pose: &'a Pose,
    pub joint: &'a JointSpec,
    /// Object-frame positions of the cluster's points.
    pub points: &'a BTreeMap<PointId, Vector3<f64>>,
    /// Starting freedom coordinates (constant-velocity prediction).
    pub init_coords: Option<&'a DVector<f64>>,
}

/// The point-independent part of the object twist Jacobian:
/// `(I4 (x) R_cw) ((E T_prev)^T (x) I3) dexp J_l(P xi) P`, a 12x6 block.
fn object_chain(t_cw: &Pose, moved: &Pose, p: &Matrix6<f64>, pxi: &Twist) -> SMatrix<f64, 12, 6> {
    left_rotation_operator(&t_cw.rotation)
        * right_mul_operator(&moved.to_homogeneous())
        * dexp_block()
        * se3_left_jacobian(pxi)
        * p
}

/// `d r / d xi` for `r = z - pi(T_cw exp(P xi) T_prev x_o)`.
pub fn object_twist_jacobian(
    x_o: &Vector3<f64>,
    t_cw: &Pose,
    t_prev: &Pose,
    p: &Matrix6<f64>,
    cam: &PinholeCamera,
    xi: &Twist,
) -> Result<Matrix2x6> {
    let pxi = Twist::from_vector(&(p * xi.to_vector()));
    let moved = exp_se3(&pxi).compose(t_prev);
    let xc = t_cw.compose(&moved).transform_point(x_o);
    let dpi = cam.projection_jacobian(&xc)?;
    let xh = Vector4::new(x_o.x, x_o.y, x_o.z, 1.0);
    Ok(-(dpi * point_operator(&xh) * object_chain(t_cw, &moved, p, &pxi)))
}

fn joint_basis_world(joint: &JointSpec) -> DMatrix<f64> {
    let b = joint.world_basis();
    DMatrix::from_column_slice(6, b.ncols(), b.as_slice())
}

fn estimate_from_coords(basis: &DMatrix<f64>, prev: &Pose, c: &DVector<f64>) -> TwistEstimate {
    let twist = if c.is_empty() {
        Twist::zero()
    } else {
        let x = basis * c;
        Twist::from_array([x[0], x[1], x[2], x[3], x[4], x[5]])
    };
    TwistEstimate {
        twist,
        coords: c.clone(),
        pose: exp_se3(&twist).compose(prev),
    }
}

/// Object twist in the joint's freedom coordinates, then `T_wo = exp(B c) T_prev`.
pub fn track_object_twist(
    input: &ObjectTrackInput,
    matches: &[PixelMatch],
    cfg: &RobustConfig,
) -> Result<TrackResult<TwistEstimate>> {
    let data: Vec<(Vector3<f64>, Vector2<f64>)> = matches
        .iter()
        .filter_map(|m| input.points.get(&m.point_id).map(|x| (*x, m.pixel)))
        .collect();
    if data.len() < MIN_OBJECT_MATCHES {
        return Err(Error::InsufficientPoints {
            got: data.len(),
            need: MIN_OBJECT_MATCHES,
        });
    }
    let d = input.joint.dof();
    let basis = joint_basis_world(input.joint);
    let p_world = crate::joints::conjugated_projector(input.joint)?.p_world;
    let cam = input.cam;
    let t_cw = input.t_cw;
    let prev = input.prev_pose;

    let eval = |c: &DVector<f64>| -> Linearization {
        let est = estimate_from_coords(&basis, prev, c);
        let chain = object_chain(t_cw, &est.pose, &p_world, &est.twist);
        let t_co = t_cw.compose(&est.pose);
        data.iter()
            .map(|(xo, z)| {
                let xc = t_co.transform_point(xo);
                let dpi = cam.projection_jacobian(&xc).ok()?;
                let r = z - cam.project_camera_point(&xc).ok()?;
                let xh = Vector4::new(xo.x, xo.y, xo.z, 1.0);
                let j6 = -(dpi * point_operator(&xh) * chain);
                let jc = DMatrix::from_column_slice(2, 6, j6.as_slice()) * &basis;
                Some((DVector::from_column_slice(r.as_slice()), jc))
            })
            .collect()
    };
    let retract = |c: &DVector<f64>, dc: &DVector<f64>| c + dc;
    let c0 = match input.init_coords {
        Some(c) if c.len() == d => c.clone(),
        _ => DVector::zeros(d),
    };
    let out = robust_lm(c0, d, cfg, eval, retract)?;
    Ok(TrackResult {
        estimate: estimate_from_coords(&basis, prev, &out.x),
        initial_cost: out.initial_cost,
        final_cost: out.final_cost,
        inlier_count: out.inlier_count,
        iterations: out.iterations,
        converged: out.converged,
        coasted: false,
        sigma: out.sigma,
    })
}

/// Constant-velocity propagation used when too few matches are available.
pub fn coast(prev_pose: &Pose, prev_coords: &DVector<f64>, joint: &JointSpec) -> TrackResult<TwistEstimate> {
    let basis = joint_basis_world(joint);
    let coords = if prev_coords.len() == joint.dof() {
        prev_coords.clone()
    } else {
        DVector::zeros(joint.dof())
    };
    TrackResult {
        estimate: estimate_from_coords(&basis, prev_pose, &coords),
        initial_cost: 0.0,
        final_cost: 0.0,
        inlier_count: 0,
        iterations: 0,
        converged: false,
        coasted: true,
        sigma: 0.0,
    }
}

/// Searches the current frame for cluster points that were not matched,
/// using the current estimate to predict their pixels, then re-solves with
/// the enlarged set starting from the current estimate. Costs per inlier are
/// compared on the enlarged set; the input is returned if nothing was found
/// or the re-solve fails.
pub fn refine_with_map_projection(
    input: &ObjectTrackInput,
    matches: &[PixelMatch],
    candidates: &[StereoObservation],
    current: &TrackResult<TwistEstimate>,
    search_radius_px: f64,
    cfg: &RobustConfig,
) -> (TrackResult<TwistEstimate>, Vec<PixelMatch>) {
    let unchanged = || (current.clone(), matches.to_vec());
    if search_radius_px <= 0.0 {
        return unchanged();
    }
    let t_co = input.t_cw.compose(&current.estimate.pose);
    let mut used: Vec<bool> = candidates
        .iter()
        .map(|o| matches.iter().any(|m| m.pixel == o.pixel()))
        .collect();
    let mut extended = matches.to_vec();
    for (pid, xo) in input.points {
        if matches.iter().any(|m| m.point_id == *pid) {
            continue;
        }
        let Ok(pred) = input.cam.project_camera_point(&t_co.transform_point(xo)) else {
            continue;
        };
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, o)| (i, (o.pixel() - pred).norm()))
            .filter(|(_, d)| *d <= search_radius_px)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            used[i] = true;
            extended.push(PixelMatch {
                point_id: *pid,
                pixel: candidates[i].pixel(),
            });
        }
    }
    if extended.len() == matches.len() {
        return unchanged();
    }
    let start = ObjectTrackInput {
        init_coords: Some(&current.estimate.coords),
        ..*input
    };
    let Ok(refined) = track_object_twist(&start, &extended, cfg) else {
        return unchanged();
    };
    if refined.inlier_count >= current.inlier_count && refined.final_cost <= refined.initial_cost {
        (refined, extended)
    } else {
        unchanged()
    }
}

/// Pixel Jacobian of a camera-frame point with respect to a left camera
/// increment: `-dpi [I | -[X_c]x]`.
pub fn camera_jacobian(dpi: &Matrix2x3<f64>, xc: &Vector3<f64>) -> Matrix2x6 {
    let mut dx = Matrix3x6::zeros();
    dx.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(xc)));
    -(dpi * dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joints::{conjugated_projector, JointType};
    use crate::liegroup::se3_left_jacobian;
    use crate::worldmodel::{Cluster, MapPoint};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg() -> RobustConfig {
        RobustConfig::default()
    }

    /// Camera at height 1.6 looking along world +x.
    fn camera_pose() -> Pose {
        let r_wc = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        Pose::new(r_wc, Vector3::new(0.0, 0.0, 1.6)).inverse()
    }

    fn static_scene(n: usize, rng: &mut ChaCha8Rng) -> WorldMap {
        let mut map = WorldMap::default();
        map.insert_cluster(Cluster::new_static(0, "road"));
        for i in 0..n {
            let p = Vector3::new(
                rng.random_range(5.0..30.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(0.0..5.0),
            );
            map.insert_point(MapPoint::new(i as u64, p, 0)).unwrap();
        }
        map
    }

    fn render(map: &WorldMap, cam: &PinholeCamera, t_cw: &Pose) -> Vec<PixelMatch> {
        map.points
            .values()
            .filter_map(|p| {
                let px = cam.project_camera_point(&t_cw.transform_point(&p.position)).ok()?;
                cam.in_image(&px).then_some(PixelMatch {
                    point_id: p.id,
                    pixel: px,
                })
            })
            .collect()
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_rho(0.0, 2.0), (0.0, 1.0));
        let (q, _) = huber_rho(4.0, 2.0);
        assert!((q - (2.0 * 2.0 * 2.0 - 4.0)).abs() < 1e-15);
        let (c, w) = huber_rho(4.0, 1.0);
        assert!((c - 3.0).abs() < 1e-15);
        assert!((w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mad_examples() {
        let c = cfg();
        assert_eq!(mad_sigma(&[2.0; 7], &c), c.sigma_floor);
        assert!((mad_sigma(&[1.0, 2.0, 3.0, 4.0, 5.0], &c) - 1.4826).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| n.sample(&mut rng)).collect();
        let s = mad_sigma(&xs, &c);
        assert!((0.98..=1.02).contains(&s), "{s}");
    }

    #[test]
    fn camera_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = static_scene(200, &mut rng);
        let cam = PinholeCamera::default();
        let gt = camera_pose();
        let m = render(&map, &cam, &gt);
        let r = track_camera(&m, &map, &cam, &gt, &cfg()).unwrap();
        assert!(r.converged);
        assert!((r.estimate.translation - gt.translation).norm() < 1e-10);
        assert!((r.estimate.rotation - gt.rotation).norm() < 1e-10);
    }

    #[test]
    fn camera_recovers_from_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = static_scene(200, &mut rng);
        let cam = PinholeCamera::default();
        let gt = camera_pose();
        let m = render(&map, &cam, &gt);
        let axis = Vector3::new(0.2, 0.9, -0.3).normalize();
        let delta = Pose::from_rotation_vector(axis * 2f64.to_radians(), Vector3::new(0.06, -0.05, 0.06));
        let init = delta.compose(&gt);
        let r = track_camera(&m, &map, &cam, &init, &cfg()).unwrap();
        let err = r.estimate.inverse().translation - gt.inverse().translation;
        assert!(err.norm() < 1e-8, "{}", err.norm());
        assert!(r.final_cost <= r.initial_cost);
    }

    #[test]
    fn camera_ignores_dynamic_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut map = static_scene(100, &mut rng);
        map.insert_cluster(Cluster::new_dynamic(9, "car", 0, Pose::identity()));
        for i in 0..50u64 {
            map.insert_point(MapPoint::new(1000 + i, Vector3::new(10.0, 0.1 * i as f64, 1.0), 9))
                .unwrap();
        }
        let cam = PinholeCamera::default();
        let gt = camera_pose();
        let mut m = render(&map, &cam, &gt);
        for pm in m.iter_mut().filter(|pm| pm.point_id >= 1000) {
            pm.pixel += Vector2::new(40.0, -25.0);
        }
        let r = track_camera(&m, &map, &cam, &gt, &cfg()).unwrap();
        assert!((r.estimate.translation - gt.translation).norm() < 1e-10);
    }

    /// Mean camera error over a few seeds with noise and gross outliers.
    fn outlier_error(c: &RobustConfig) -> f64 {
        let cam = PinholeCamera::default();
        let gt = camera_pose();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut total = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let map = static_scene(300, &mut rng);
            let mut m = render(&map, &cam, &gt);
            for pm in m.iter_mut() {
                pm.pixel += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                if rng.random_bool(0.3) {
                    pm.pixel += Vector2::new(rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
                }
            }
            let r = track_camera(&m, &map, &cam, &gt, c).unwrap();
            total += (r.estimate.inverse().translation - gt.inverse().translation).norm();
        }
        total / 5.0
    }

    #[test]
    fn outlier_gate_reduces_error() {
        let gated = outlier_error(&cfg());
        let ungated = outlier_error(&RobustConfig { outlier_gate: 0.0, ..cfg() });
        assert!(gated < ungated, "{gated} vs {ungated}");
    }

    #[test]
    fn outlier_gate_is_inert_without_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = static_scene(200, &mut rng);
        let cam = PinholeCamera::default();
        let gt = camera_pose();
        let m = render(&map, &cam, &gt);
        let init = Pose::from_rotation_vector(Vector3::new(0.0, 0.01, 0.0), Vector3::new(0.03, 0.0, -0.02)).compose(&gt);
        let a = track_camera(&m, &map, &cam, &init, &cfg()).unwrap();
        let b = track_camera(&m, &map, &cam, &init, &RobustConfig { outlier_gate: 0.0, ..cfg() }).unwrap();
        assert!((a.estimate.translation - b.estimate.translation).norm() < 1e-9);
    }

    #[test]
    fn negative_gate_rejected() {
        assert!(RobustConfig { outlier_gate: -1.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn camera_too_few_points() {
        let map = WorldMap::default();
        let cam = PinholeCamera::default();
        assert!(matches!(
            track_camera(&[], &map, &cam, &Pose::identity(), &cfg()),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    struct ObjectSetup {
        cam: PinholeCamera,
        t_cw: Pose,
        prev: Pose,
        joint: JointSpec,
        points: BTreeMap<PointId, Vector3<f64>>,
    }

    fn object_setup(jtype: JointType) -> ObjectSetup {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: BTreeMap<PointId, Vector3<f64>> = (0..60u64)
            .map(|i| {
                (
                    i,
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-0.9..0.9),
                        rng.random_range(0.0..1.5),
                    ),
                )
            })
            .collect();
        let joint = JointSpec::new(jtype, Pose::from_translation(Vector3::new(12.0, -3.0, 0.0)), "road", "car");
        ObjectSetup {
            cam: PinholeCamera::default(),
            t_cw: camera_pose(),
            prev: Pose::from_translation(Vector3::new(12.0, -3.0, 0.0)),
            joint,
            points,
        }
    }

    fn object_matches(s: &ObjectSetup, pose: &Pose, noise: f64, seed: u64) -> Vec<PixelMatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let t_co = s.t_cw.compose(pose);
        s.points
            .iter()
            .map(|(id, x)| {
                let mut px = s.cam.project_camera_point(&t_co.transform_point(x)).unwrap();
                if noise > 0.0 {
                    px += Vector2::new(n.sample(&mut rng), n.sample(&mut rng));
                }
                PixelMatch { point_id: *id, pixel: px }
            })
            .collect()
    }

    fn input<'a>(s: &'a ObjectSetup) -> ObjectTrackInput<'a> {
        ObjectTrackInput {
            cam: &s.cam,
            t_cw: &s.t_cw,
            prev_pose: &s.prev,
            joint: &s.joint,
            points: &s.points,
            init_coords: None,
        }
    }

    #[test]
    fn static_object_has_zero_twist() {
        let s = object_setup(JointType::Planar);
        let m = object_matches(&s, &s.prev, 0.0, 0);
        let r = track_object_twist(&input(&s), &m, &cfg()).unwrap();
        assert!(r.estimate.twist.to_vector().norm() <= 1e-8);
    }

    #[test]
    fn planar_car_twist_recovered() {
        let s = object_setup(JointType::Planar);
        let truth = Twist::from_array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let world = adjoint_apply(&s.joint.frame, &truth);
        let moved = exp_se3(&world).compose(&s.prev);
        let m = object_matches(&s, &moved, 0.0, 0);
        let r = track_object_twist(&input(&s), &m, &cfg()).unwrap();
        let jt = s.joint.joint_twist(&r.estimate.twist).to_vector();
        assert!((jt - truth.to_vector()).norm() < 1e-6, "{jt}");
        let p = conjugated_projector(&s.joint).unwrap().p_world;
        let x = r.estimate.twist.to_vector();
        assert!((p * x - x).norm() < 1e-10);
    }

    fn adjoint_apply(frame: &Pose, xi: &Twist) -> Twist {
        crate::liegroup::adjoint(frame).apply(xi)
    }

    #[test]
    fn planar_noise_stays_in_plane_free_does_not() {
        let truth = Twist::from_array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut free_drift = 0.0f64;
        for (jtype, seed) in [(JointType::Planar, 5), (JointType::Free, 5)] {
            let s = object_setup(jtype);
            let world = adjoint_apply(&s.joint.frame, &truth);
            let moved = exp_se3(&world).compose(&s.prev);
            let m = object_matches(&s, &moved, 0.5, seed);
            let r = track_object_twist(&input(&s), &m, &cfg()).unwrap();
            let dz = (r.estimate.pose.translation.z - s.prev.translation.z).abs();
            match jtype {
                JointType::Planar => assert!(dz <= 1e-8),
                _ => free_drift = dz,
            }
        }
        assert!(free_drift > 0.0);
    }

    #[test]
    fn too_few_object_matches() {
        let s = object_setup(JointType::Planar);
        let m = object_matches(&s, &s.prev, 0.0, 0);
        assert!(matches!(
            track_object_twist(&input(&s), &m[..2], &cfg()),
            Err(Error::InsufficientPoints { .. })
        ));
        let c = coast(&s.prev, &DVector::from_vec(vec![0.1, 0.0, 0.0]), &s.joint);
        assert!(c.coasted);
    }

    /// Compact form of the object Jacobian: `-dpi R_cw [I | -[Y]x] J_l P`.
    fn compact_jacobian(
        xo: &Vector3<f64>,
        t_cw: &Pose,
        t_prev: &Pose,
        p: &Matrix6<f64>,
        cam: &PinholeCamera,
        xi: &Twist,
    ) -> Matrix2x6 {
        let pxi = Twist::from_vector(&(p * xi.to_vector()));
        let moved = exp_se3(&pxi).compose(t_prev);
        let y = moved.transform_point(xo);
        let xc = t_cw.transform_point(&y);
        let dpi = cam.projection_jacobian(&xc).unwrap();
        let mut dy = Matrix3x6::zeros();
        dy.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&y)));
        -(dpi * t_cw.rotation * dy * se3_left_jacobian(&pxi) * p)
    }

    fn fd_jacobian(
        xo: &Vector3<f64>,
        t_cw: &Pose,
        t_prev: &Pose,
        p: &Matrix6<f64>,
        cam: &PinholeCamera,
        xi: &Twist,
    ) -> Matrix2x6 {
        let h = 1e-6;
        let res = |x: &nalgebra::Vector6<f64>| {
            let pxi = Twist::from_vector(&(p * x));
            let xc = t_cw
                .compose(&exp_se3(&pxi).compose(t_prev))
                .transform_point(xo);
            -cam.project_camera_point(&xc).unwrap()
        };
        let mut j = Matrix2x6::zeros();
        for k in 0..6 {
            let e = nalgebra::Vector6::ith(k, h);
            let x = xi.to_vector();
            j.set_column(k, &((res(&(x + e)) - res(&(x - e))) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn object_jacobian_free_at_zero() {
        let s = object_setup(JointType::Free);
        let p = Matrix6::identity();
        let xo = Vector3::new(0.5, 0.2, 0.7);
        let xi = Twist::zero();
        let j = object_twist_jacobian(&xo, &s.t_cw, &s.prev, &p, &s.cam, &xi).unwrap();
        let fd = fd_jacobian(&xo, &s.t_cw, &s.prev, &p, &s.cam, &xi);
        assert!((j - fd).norm() < 1e-6 * j.norm());
    }

    #[test]
    fn object_jacobian_annihilates_constrained_directions() {
        let s = object_setup(JointType::Planar);
        let p = conjugated_projector(&s.joint).unwrap().p_world;
        let xo = Vector3::new(0.5, 0.2, 0.7);
        let xi = Twist::from_array([0.3, 0.1, 0.2, 0.05, -0.02, 0.04]);
        let j = object_twist_jacobian(&xo, &s.t_cw, &s.prev, &p, &s.cam, &xi).unwrap();
        assert!((j * (Matrix6::identity() - p)).norm() < 1e-12);
    }

    #[test]
    fn object_jacobian_random_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = PinholeCamera::default();
        let t_cw = camera_pose();
        let mut worst = 0.0f64;
        for trial in 0..1000 {
            let jtype = JointType::ALL[trial % 5];
            let frame = exp_se3(&Twist::from_array(std::array::from_fn(|_| rng.random_range(-0.3..0.3))))
                .compose(&Pose::from_translation(Vector3::new(15.0, 0.0, 0.0)));
            let joint = JointSpec::new(jtype, frame, "road", "car");
            let p = conjugated_projector(&joint).unwrap().p_world;
            let prev = exp_se3(&Twist::from_array(std::array::from_fn(|_| rng.random_range(-0.2..0.2))))
                .compose(&Pose::from_translation(Vector3::new(12.0, rng.random_range(-3.0..3.0), 0.5)));
            let xo = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.5),
            );
            let xi = Twist::from_array(std::array::from_fn(|_| rng.random_range(-0.3..0.3)));
            let j = object_twist_jacobian(&xo, &t_cw, &prev, &p, &cam, &xi).unwrap();
            let c = compact_jacobian(&xo, &t_cw, &prev, &p, &cam, &xi);
            assert!((j - c).norm() <= 1e-9 * (1.0 + c.norm()));
            if j.norm() < 1e-9 {
                continue;
            }
            let fd = fd_jacobian(&xo, &t_cw, &prev, &p, &cam, &xi);
            worst = worst.max((j - fd).norm() / fd.norm());
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn refine_with_zero_radius_is_identity() {
        let s = object_setup(JointType::Planar);
        let m = object_matches(&s, &s.prev, 0.0, 0);
        let r = track_object_twist(&input(&s), &m[..20], &cfg()).unwrap();
        let (r2, m2) = refine_with_map_projection(&input(&s), &m[..20], &[], &r, 0.0, &cfg());
        assert_eq!(r2, r);
        assert_eq!(m2.len(), 20);
    }

    #[test]
    fn refine_finds_withheld_matches() {
        let s = object_setup(JointType::Planar);
        let truth = Twist::from_array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let world = adjoint_apply(&s.joint.frame, &truth);
        let moved = exp_se3(&world).compose(&s.prev);
        let all = object_matches(&s, &moved, 0.5, 9);
        let half: Vec<PixelMatch> = all.iter().step_by(2).copied().collect();
        let candidates: Vec<StereoObservation> = all
            .iter()
            .map(|m| StereoObservation {
                u: m.pixel.x,
                v: m.pixel.y,
                disparity: 20.0,
                point_id: m.point_id,
                cluster_id: 1,
                frame_index: 1,
            })
            .collect();
        let r = track_object_twist(&input(&s), &half, &cfg()).unwrap();
        let (r2, m2) = refine_with_map_projection(&input(&s), &half, &candidates, &r, 3.0, &cfg());
        assert!(m2.len() > half.len());
        assert!(r2.inlier_count > r.inlier_count);
        let err = |t: &Twist| (s.joint.joint_twist(t).to_vector() - truth.to_vector()).norm();
        assert!(err(&r2.estimate.twist) < err(&r.estimate.twist));
        for m in &half {
            assert!(m2.contains(m));
        }
    }

    #[test]
    fn tracking_is_deterministic() {
        let s = object_setup(JointType::Planar);
        let m = object_matches(&s, &s.prev, 0.5, 1);
        let a = track_object_twist(&input(&s), &m, &cfg()).unwrap();
        let b = track_object_twist(&input(&s), &m, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn accepted_twists_lie_in_freedom_space(
            v in proptest::array::uniform3(-0.4f64..0.4),
            w in proptest::array::uniform3(-0.05f64..0.05),
            seed in 0u64..1000,
        ) {
            let s = object_setup(JointType::Planar);
            let world = Twist::new(Vector3::from(v), Vector3::from(w));
            let moved = exp_se3(&world).compose(&s.prev);
            let m = object_matches(&s, &moved, 0.5, seed);
            let r = track_object_twist(&input(&s), &m, &cfg()).unwrap();
            let p = conjugated_projector(&s.joint).unwrap().p_world;
            let x = r.estimate.twist.to_vector();
            proptest::prop_assert!((p * x - x).norm() < 1e-10);
            proptest::prop_assert!(r.final_cost <= r.initial_cost);
        }
    }
}
