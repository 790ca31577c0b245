use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6x3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::residuals::{residual_constvel, residual_dyna, residual_stat};
use super::{BAProblem, BaConfig};
use crate::error::{Error, Result};
use crate::liegroup::{exp_se3, Twist};
use crate::scenegeom::PinholeCamera;
use crate::tracking::{huber_rho, mad_sigma, RobustConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub rounds: usize,
    pub converged: bool,
    /// Reprojection scale of the last round, pixels.
    pub sigma_reproj: f64,
    /// Constant-velocity scale of the last round.
    pub sigma_const: f64,
}

struct Layout {
    cam: Vec<Option<usize>>,
    twist: Vec<Option<usize>>,
    n_pose: usize,
    n_points: usize,
}

impl Layout {
    fn new(p: &BAProblem) -> Self {
        let mut off = 0;
        let cam = p
            .cameras
            .iter()
            .map(|c| {
                (!c.fixed).then(|| {
                    off += 6;
                    off - 6
                })
            })
            .collect();
        let twist = p
            .twists
            .iter()
            .map(|t| {
                (!t.fixed && t.dof() > 0).then(|| {
                    off += t.dof();
                    off - t.dof()
                })
            })
            .collect();
        Self {
            cam,
            twist,
            n_pose: off,
            n_points: p.points.len(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Scales {
    reproj: f64,
    constvel: f64,
}

/// A reprojection block: point Jacobian plus up to two pose Jacobians
/// (camera, object twist), padded to six columns.
struct ReprojEntry {
    r: Vector3<f64>,
    w: f64,
    point: usize,
    j_point: Matrix3<f64>,
    poses: [Option<(usize, usize, Matrix3x6<f64>)>; 2],
}

/// A constant-velocity block over up to three twist variables.
struct ConstEntry {
    r: Vector6<f64>,
    w: f64,
    jacs: Vec<(usize, DMatrix<f64>)>,
}

struct Linearized {
    reproj: Vec<ReprojEntry>,
    constvel: Vec<ConstEntry>,
}

fn robust(cfg: &BaConfig, floor: f64) -> RobustConfig {
    RobustConfig {
        mad_scale: cfg.mad_scale,
        sigma_floor: floor,
        ..RobustConfig::default()
    }
}

fn estimate_scales(p: &BAProblem, cam: &PinholeCamera, cfg: &BaConfig) -> Scales {
    let mut rep = Vec::new();
    for b in &p.stat {
        if let Ok(l) = residual_stat(cam, &p.cameras[b.camera].pose, &p.points[b.point].position, &b.z) {
            rep.extend(l.r.iter());
        }
    }
    for b in &p.dyna {
        if let Ok(l) = residual_dyna(cam, &p.cameras[b.camera].pose, &p.twists[b.twist], &p.points[b.point].position, &b.z) {
            rep.extend(l.r.iter());
        }
    }
    let mut cv = Vec::new();
    for b in &p.constvel {
        let cj = &p.clusters[&b.cluster];
        let vars = [&p.twists[b.twists[0]], &p.twists[b.twists[1]], &p.twists[b.twists[2]]];
        if let Ok(l) = residual_constvel(vars, b.frames, cj) {
            cv.extend(cj.free_components.iter().map(|&i| l.r[i]));
        }
    }
    Scales {
        reproj: mad_sigma(&rep, &robust(cfg, cfg.sigma_floor)),
        constvel: mad_sigma(&cv, &robust(cfg, cfg.const_sigma_floor)),
    }
}

fn pad_twist(j: &DMatrix<f64>) -> Matrix3x6<f64> {
    let mut m = Matrix3x6::zeros();
    m.view_mut((0, 0), (3, j.ncols())).copy_from(j);
    m
}

/// Robustified cost and, when requested, the weighted linearization.
fn linearize(
    p: &BAProblem,
    cam: &PinholeCamera,
    cfg: &BaConfig,
    s: &Scales,
    layout: &Layout,
    with_jac: bool,
) -> (f64, Linearized) {
    let inv_r2 = 1.0 / (s.reproj * s.reproj);
    let big = 50.0 * cfg.huber_delta;
    let invalid_reproj = huber_rho(big * big, cfg.huber_delta).0 * inv_r2;
    let big_c = 50.0 * cfg.const_huber_delta;
    let invalid_const = huber_rho(big_c * big_c, cfg.const_huber_delta).0;
    let mut cost = 0.0;
    let mut lin = Linearized {
        reproj: Vec::new(),
        constvel: Vec::new(),
    };

    for b in &p.stat {
        let Ok(l) = residual_stat(cam, &p.cameras[b.camera].pose, &p.points[b.point].position, &b.z) else {
            cost += invalid_reproj;
            continue;
        };
        let (rho, w) = huber_rho(l.r.norm_squared(), cfg.huber_delta);
        cost += rho * inv_r2;
        if with_jac {
            lin.reproj.push(ReprojEntry {
                r: l.r,
                w: w * inv_r2,
                point: b.point,
                j_point: l.j_point,
                poses: [layout.cam[b.camera].map(|o| (o, 6, l.j_cam)), None],
            });
        }
    }
    for b in &p.dyna {
        let var = &p.twists[b.twist];
        let Ok(l) = residual_dyna(cam, &p.cameras[b.camera].pose, var, &p.points[b.point].position, &b.z) else {
            cost += invalid_reproj;
            continue;
        };
        let (rho, w) = huber_rho(l.r.norm_squared(), cfg.huber_delta);
        cost += rho * inv_r2;
        if with_jac {
            lin.reproj.push(ReprojEntry {
                r: l.r,
                w: w * inv_r2,
                point: b.point,
                j_point: l.j_point,
                poses: [
                    layout.cam[b.camera].map(|o| (o, 6, l.j_cam)),
                    layout.twist[b.twist].map(|o| (o, var.dof(), pad_twist(&l.j_twist))),
                ],
            });
        }
    }
    let inv_c = 1.0 / s.constvel;
    for b in &p.constvel {
        let cj = &p.clusters[&b.cluster];
        let vars = [&p.twists[b.twists[0]], &p.twists[b.twists[1]], &p.twists[b.twists[2]]];
        let Ok(l) = residual_constvel(vars, b.frames, cj) else {
            cost += invalid_const;
            continue;
        };
        let rn = l.r * inv_c;
        let (rho, w) = huber_rho(rn.norm_squared(), cfg.const_huber_delta);
        cost += rho;
        if with_jac {
            let jacs: Vec<(usize, DMatrix<f64>)> = l
                .j
                .into_iter()
                .enumerate()
                .filter_map(|(k, j)| layout.twist[b.twists[k]].map(|o| (o, j)))
                .collect();
            if !jacs.is_empty() {
                lin.constvel.push(ConstEntry {
                    r: l.r,
                    w: w * inv_c * inv_c,
                    jacs,
                });
            }
        }
    }
    (cost, lin)
}

/// One pose-point coupling block `H_pose,point`, rows beyond `dim` zero.
#[derive(Clone, Copy, Debug)]
struct Coupling {
    offset: usize,
    dim: usize,
    h: Matrix6x3<f64>,
}

/// Block normal equations `H dx = b` with points kept as 3x3 blocks.
struct Normal {
    hpp: DMatrix<f64>,
    bp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    bl: Vec<Vector3<f64>>,
    /// Per point, sorted by pose offset.
    hpl: Vec<Vec<Coupling>>,
}

impl Normal {
    fn assemble(layout: &Layout, lin: &Linearized) -> Self {
        let mut n = Self {
            hpp: DMatrix::zeros(layout.n_pose, layout.n_pose),
            bp: DVector::zeros(layout.n_pose),
            hll: vec![Matrix3::zeros(); layout.n_points],
            bl: vec![Vector3::zeros(); layout.n_points],
            hpl: vec![Vec::new(); layout.n_points],
        };
        for e in &lin.reproj {
            let j = e.point;
            let wjp = e.w * e.j_point.transpose();
            n.hll[j] += wjp * e.j_point;
            n.bl[j] -= wjp * e.r;
            for (oa, da, ja) in e.poses.iter().flatten() {
                let wja = e.w * ja.transpose();
                let g = wja * e.r;
                let mut v = n.bp.rows_mut(*oa, *da);
                v -= g.rows(0, *da);
                for (ob, db, jb) in e.poses.iter().flatten() {
                    let blk = wja * jb;
                    let mut v = n.hpp.view_mut((*oa, *ob), (*da, *db));
                    v += blk.view((0, 0), (*da, *db));
                }
                let c = wja * e.j_point;
                let list = &mut n.hpl[j];
                match list.binary_search_by_key(oa, |c| c.offset) {
                    Ok(i) => list[i].h += c,
                    Err(i) => list.insert(
                        i,
                        Coupling {
                            offset: *oa,
                            dim: *da,
                            h: c,
                        },
                    ),
                }
            }
        }
        for e in &lin.constvel {
            for (oa, ja) in &e.jacs {
                let wja = e.w * ja.transpose();
                let g = &wja * e.r;
                let mut v = n.bp.rows_mut(*oa, ja.ncols());
                v -= &g;
                for (ob, jb) in &e.jacs {
                    let blk = &wja * jb;
                    let mut v = n.hpp.view_mut((*oa, *ob), (ja.ncols(), jb.ncols()));
                    v += &blk;
                }
            }
        }
        n
    }

    fn gradient_norm(&self) -> f64 {
        let mut m = self.bp.amax();
        for b in &self.bl {
            m = m.max(b.amax());
        }
        m
    }

    fn damped_point(&self, j: usize, lambda: f64) -> Matrix3<f64> {
        let mut h = self.hll[j];
        for i in 0..3 {
            h[(i, i)] += lambda * self.hll[j][(i, i)].max(1e-9);
        }
        h
    }

    fn damped_pose(&self, lambda: f64) -> DMatrix<f64> {
        let mut h = self.hpp.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += lambda * self.hpp[(i, i)].max(1e-9);
        }
        h
    }

    fn solve_schur(&self, lambda: f64) -> Result<(DVector<f64>, Vec<Vector3<f64>>)> {
        let mut s = self.damped_pose(lambda);
        let mut rhs = self.bp.clone();
        let mut inv = Vec::with_capacity(self.hll.len());
        for j in 0..self.hll.len() {
            let hinv = self
                .damped_point(j, lambda)
                .try_inverse()
                .ok_or(Error::SingularReducedSystem)?;
            for a in &self.hpl[j] {
                let bh = a.h * hinv;
                let t = bh * self.bl[j];
                let mut v = rhs.rows_mut(a.offset, a.dim);
                v -= t.rows(0, a.dim);
                for b in &self.hpl[j] {
                    let prod = bh * b.h.transpose();
                    let mut v = s.view_mut((a.offset, b.offset), (a.dim, b.dim));
                    v -= prod.view((0, 0), (a.dim, b.dim));
                }
            }
            inv.push(hinv);
        }
        let dp = solve_dense(s, &rhs)?;
        let dl = (0..self.hll.len())
            .map(|j| {
                let mut r = self.bl[j];
                for c in &self.hpl[j] {
                    let mut x = Vector6::zeros();
                    x.rows_mut(0, c.dim).copy_from(&dp.rows(c.offset, c.dim));
                    r -= c.h.transpose() * x;
                }
                inv[j] * r
            })
            .collect();
        Ok((dp, dl))
    }

    fn solve_full(&self, lambda: f64) -> Result<(DVector<f64>, Vec<Vector3<f64>>)> {
        let np = self.bp.len();
        let n = np + 3 * self.hll.len();
        let mut h = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        h.view_mut((0, 0), (np, np)).copy_from(&self.damped_pose(lambda));
        rhs.rows_mut(0, np).copy_from(&self.bp);
        for j in 0..self.hll.len() {
            let o = np + 3 * j;
            h.view_mut((o, o), (3, 3)).copy_from(&self.damped_point(j, lambda));
            rhs.rows_mut(o, 3).copy_from(&self.bl[j]);
            for c in &self.hpl[j] {
                let b = c.h.rows(0, c.dim);
                h.view_mut((c.offset, o), (c.dim, 3)).copy_from(&b);
                h.view_mut((o, c.offset), (3, c.dim)).copy_from(&b.transpose());
            }
        }
        let x = solve_dense(h, &rhs)?;
        let dp = x.rows(0, np).into_owned();
        let dl = (0..self.hll.len())
            .map(|j| Vector3::from_column_slice(x.rows(np + 3 * j, 3).as_slice()))
            .collect();
        Ok((dp, dl))
    }
}

fn solve_dense(h: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if h.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if let Some(c) = h.clone().cholesky() {
        return Ok(c.solve(rhs));
    }
    h.lu().solve(rhs).ok_or(Error::SingularReducedSystem)
}

fn apply_step(p: &mut BAProblem, layout: &Layout, dp: &DVector<f64>, dl: &[Vector3<f64>]) {
    for (i, c) in p.cameras.iter_mut().enumerate() {
        if let Some(o) = layout.cam[i] {
            let d = dp.rows(o, 6);
            let e = exp_se3(&Twist::from_array([d[0], d[1], d[2], d[3], d[4], d[5]]));
            c.pose = e.compose(&c.pose);
        }
    }
    for (i, t) in p.twists.iter_mut().enumerate() {
        if let Some(o) = layout.twist[i] {
            t.coords += dp.rows(o, t.dof());
        }
    }
    for (pt, d) in p.points.iter_mut().zip(dl) {
        pt.position += d;
    }
}

pub(super) fn evaluate_cost(p: &BAProblem, cam: &PinholeCamera, cfg: &BaConfig) -> f64 {
    let s = estimate_scales(p, cam, cfg);
    linearize(p, cam, cfg, &s, &Layout::new(p), false).0
}

/// Robust Levenberg-Marquardt over the problem, in place.
///
/// Each outer round re-estimates the MAD scales, runs LM on the freedom
/// coordinates and then folds them into the pose snapshots.
pub fn solve_ba(problem: &mut BAProblem, cam: &PinholeCamera, cfg: &BaConfig) -> Result<BaReport> {
    problem.validate()?;
    let layout = Layout::new(problem);
    let blocks = problem.stat.len() + problem.dyna.len() + problem.constvel.len();
    let abs_tol = 1e-20 * blocks.max(1) as f64;
    let mut report = BaReport {
        initial_cost: 0.0,
        final_cost: 0.0,
        iterations: 0,
        rounds: 0,
        converged: false,
        sigma_reproj: 0.0,
        sigma_const: 0.0,
    };
    for round in 0..cfg.outer_rounds.max(1) {
        let scales = estimate_scales(problem, cam, cfg);
        let (mut cost, mut entries) = linearize(problem, cam, cfg, &scales, &layout, true);
        if round == 0 {
            report.initial_cost = cost;
        }
        let mut lambda = cfg.lambda_init;
        let mut iterations = 0;
        let mut converged = false;
        let mut accepted_any = false;
        'outer: while iterations < cfg.max_iters {
            if cost <= abs_tol || layout.n_pose + layout.n_points == 0 {
                converged = true;
                break;
            }
            let normal = Normal::assemble(&layout, &entries);
            if normal.gradient_norm() < 1e-15 {
                converged = true;
                break;
            }
            loop {
                iterations += 1;
                let solved = if cfg.use_schur {
                    normal.solve_schur(lambda)
                } else {
                    normal.solve_full(lambda)
                };
                let (dp, dl) = match solved {
                    Ok(s) => s,
                    Err(e) => {
                        lambda *= 10.0;
                        if iterations >= cfg.max_iters {
                            if accepted_any {
                                break 'outer;
                            }
                            return Err(e);
                        }
                        continue;
                    }
                };
                let step_norm = (dp.norm_squared() + dl.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
                let mut candidate = problem.clone();
                apply_step(&mut candidate, &layout, &dp, &dl);
                let (cand_cost, _) = linearize(&candidate, cam, cfg, &scales, &layout, false);
                if cand_cost < cost {
                    let rel = (cost - cand_cost) / cost;
                    *problem = candidate;
                    let (c, e) = linearize(problem, cam, cfg, &scales, &layout, true);
                    cost = c;
                    entries = e;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted_any = true;
                    if rel < cfg.convergence_tol || step_norm < 1e-14 {
                        converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
                if (cand_cost - cost).abs() <= cfg.convergence_tol * cost || step_norm < 1e-14 {
                    converged = true;
                    break 'outer;
                }
                lambda *= 10.0;
                if iterations >= cfg.max_iters {
                    break 'outer;
                }
            }
        }
        if !converged && !accepted_any {
            return Err(Error::Diverged { iterations });
        }
        for t in &mut problem.twists {
            t.refresh();
        }
        report.iterations += iterations;
        report.rounds = round + 1;
        report.converged = converged;
        report.final_cost = cost;
        report.sigma_reproj = scales.reproj;
        report.sigma_const = scales.constvel;
    }
    Ok(report)
}
