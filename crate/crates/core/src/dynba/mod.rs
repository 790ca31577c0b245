//! Dynamic bundle adjustment.
//!
//! Variables are camera poses, static world points, per-keyframe object pose
//! corrections and object-frame points. An object pose at a temporal keyframe
//! is `exp(B c) S`, where `S` is a frozen snapshot, `B` the world-frame joint
//! basis and `c` the freedom coordinates being optimized. Three residual
//! families enter the cost:
//!
//! * `stat`: stereo reprojection `(u, v, u_right)` of a static point;
//! * `dyna`: the same for an object point carried by its object pose;
//! * `constvel`: the change between two consecutive inter-pose twists of a
//!   cluster, expressed in its joint frame and weighted by `W`.
//!
//! Stereo reprojection (rather than the left image alone) fixes the scale
//! gauge, so fixing the oldest camera leaves a nonsingular problem.

mod residuals;
mod solver;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joints::{projector, JointSpec};
use crate::liegroup::{adjoint, exp_se3, log_se3, Pose, Twist};
use crate::scenegeom::PinholeCamera;
use crate::worldmodel::{ClusterId, PointId, WorldMap};

pub use residuals::{
    dyna_twist_jacobian, residual_constvel, residual_dyna, residual_stat, ConstVelLin, DynaLin,
    StatLin,
};
pub use solver::{solve_ba, BaReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    /// Huber threshold on the raw stereo reprojection norm, pixels.
    pub huber_delta: f64,
    /// Huber threshold on the whitened constant-velocity residual.
    pub const_huber_delta: f64,
    /// Diagonal of `W`, joint-frame `(v, omega)` order.
    pub weights: [f64; 6],
    pub mad_scale: f64,
    pub sigma_floor: f64,
    pub const_sigma_floor: f64,
    pub max_iters: usize,
    pub lambda_init: f64,
    pub convergence_tol: f64,
    /// Snapshot refreshes; each runs a full LM.
    pub outer_rounds: usize,
    pub use_schur: bool,
    /// Points need at least this many observations inside the window.
    pub min_observations: usize,
    pub use_constvel: bool,
    pub use_dyna: bool,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            huber_delta: 2.0,
            const_huber_delta: 1.0,
            weights: [1.0, 1.0, 1.0, 10.0, 10.0, 10.0],
            mad_scale: 1.4826,
            sigma_floor: 0.05,
            const_sigma_floor: 1e-3,
            max_iters: 30,
            lambda_init: 1e-4,
            convergence_tol: 1e-10,
            outer_rounds: 2,
            use_schur: true,
            min_observations: 2,
            use_constvel: true,
            use_dyna: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraVar {
    pub frame_index: usize,
    /// `T_cw`.
    pub pose: Pose,
    pub fixed: bool,
}

/// Object pose at one temporal keyframe: `exp(B c) snapshot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistVar {
    pub cluster: ClusterId,
    pub frame_index: usize,
    pub snapshot: Pose,
    pub coords: DVector<f64>,
    /// World-frame joint basis `Ad_wl A`, 6 x d.
    pub basis: DMatrix<f64>,
    pub fixed: bool,
}

impl TwistVar {
    pub fn twist(&self) -> Twist {
        if self.coords.is_empty() {
            return Twist::zero();
        }
        let x = &self.basis * &self.coords;
        Twist::from_array([x[0], x[1], x[2], x[3], x[4], x[5]])
    }

    pub fn pose(&self) -> Pose {
        exp_se3(&self.twist()).compose(&self.snapshot)
    }

    pub fn dof(&self) -> usize {
        self.coords.len()
    }

    /// Folds the correction into the snapshot.
    pub fn refresh(&mut self) {
        self.snapshot = self.pose();
        self.coords.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointVar {
    pub point_id: PointId,
    /// `None` for static points.
    pub cluster: Option<ClusterId>,
    pub position: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatBlock {
    pub camera: usize,
    pub point: usize,
    /// Observed `(u, v, u_right)`.
    pub z: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynaBlock {
    pub camera: usize,
    pub twist: usize,
    pub point: usize,
    pub z: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstVelBlock {
    pub cluster: ClusterId,
    /// Twist variables of frames `i-1`, `i`, `i+1`.
    pub twists: [usize; 3],
    pub frames: [usize; 3],
}

/// Per-cluster data for the constant-velocity residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterJoint {
    pub joint: JointSpec,
    /// `W^1/2 Pi_l Ad_lw`.
    pub whitening: Matrix6<f64>,
    /// Joint-frame components that carry freedom.
    pub free_components: Vec<usize>,
}

impl ClusterJoint {
    pub fn new(joint: JointSpec, weights: &[f64; 6]) -> Result<Self> {
        let pi = projector(&joint.basis)?;
        let w_half = Matrix6::from_diagonal(&nalgebra::Vector6::from_fn(|i, _| weights[i].sqrt()));
        let whitening = w_half * pi * adjoint(&joint.frame.inverse()).0;
        let free_components = (0..6).filter(|&i| pi[(i, i)] > 0.5).collect();
        Ok(Self {
            joint,
            whitening,
            free_components,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BAProblem {
    pub cameras: Vec<CameraVar>,
    pub twists: Vec<TwistVar>,
    pub points: Vec<PointVar>,
    pub stat: Vec<StatBlock>,
    pub dyna: Vec<DynaBlock>,
    pub constvel: Vec<ConstVelBlock>,
    pub clusters: BTreeMap<ClusterId, ClusterJoint>,
    pub weights: [f64; 6],
}

impl BAProblem {
    pub fn camera_index(&self, frame: usize) -> Option<usize> {
        self.cameras.iter().position(|c| c.frame_index == frame)
    }

    pub fn twist_index(&self, cluster: ClusterId, frame: usize) -> Option<usize> {
        self.twists
            .iter()
            .position(|t| t.cluster == cluster && t.frame_index == frame)
    }

    /// Structured-text dump of variables and blocks.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    /// Checks that every block references live variables.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        for b in &self.stat {
            if b.camera >= self.cameras.len() || b.point >= self.points.len() {
                return bad("stat block references a missing variable");
            }
        }
        for b in &self.dyna {
            if b.camera >= self.cameras.len()
                || b.twist >= self.twists.len()
                || b.point >= self.points.len()
            {
                return bad("dyna block references a missing variable");
            }
        }
        for b in &self.constvel {
            if b.twists.iter().any(|&t| t >= self.twists.len()) || !self.clusters.contains_key(&b.cluster) {
                return bad("constvel block references a missing variable");
            }
            if !(b.frames[0] < b.frames[1] && b.frames[1] < b.frames[2]) {
                return bad("constvel frames must increase");
            }
        }
        Ok(())
    }

    /// Object poses per cluster, in frame order.
    pub fn object_poses(&self, cluster: ClusterId) -> Vec<(usize, Pose)> {
        let mut v: Vec<_> = self
            .twists
            .iter()
            .filter(|t| t.cluster == cluster)
            .map(|t| (t.frame_index, t.pose()))
            .collect();
        v.sort_by_key(|(f, _)| *f);
        v
    }
}

/// Builds the problem over `temporal` and `spatial` keyframes of `map`.
///
/// Cameras of all listed keyframes are variables, the oldest one fixed.
/// Object poses become variables only on temporal keyframes; the oldest one
/// per cluster is fixed, which removes the object-frame gauge. Points need
/// `cfg.min_observations` observations among the included blocks.
pub fn build_problem(
    map: &WorldMap,
    temporal: &[usize],
    spatial: &[usize],
    cfg: &BaConfig,
) -> Result<BAProblem> {
    let temporal_set: BTreeSet<usize> = temporal
        .iter()
        .copied()
        .filter(|f| map.keyframes.contains_key(f))
        .collect();
    let frames: BTreeSet<usize> = temporal_set
        .iter()
        .copied()
        .chain(spatial.iter().copied().filter(|f| map.keyframes.contains_key(f)))
        .collect();
    if frames.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let oldest = *frames.iter().next().expect("nonempty");
    let cameras: Vec<CameraVar> = frames
        .iter()
        .map(|&f| CameraVar {
            frame_index: f,
            pose: map.keyframes[&f].pose,
            fixed: f == oldest,
        })
        .collect();
    let cam_idx: BTreeMap<usize, usize> = cameras.iter().enumerate().map(|(i, c)| (c.frame_index, i)).collect();

    let mut twists = Vec::new();
    let mut twist_idx: BTreeMap<(ClusterId, usize), usize> = BTreeMap::new();
    let mut clusters = BTreeMap::new();
    if cfg.use_dyna {
        for c in map.dynamic_clusters() {
            let Some(joint) = &c.joint else { continue };
            let frames_here: Vec<usize> = temporal_set
                .iter()
                .copied()
                .filter(|f| c.poses.contains_key(f))
                .collect();
            if frames_here.is_empty() {
                continue;
            }
            let wb = joint.world_basis();
            let basis = DMatrix::from_column_slice(6, wb.ncols(), wb.as_slice());
            for (k, &f) in frames_here.iter().enumerate() {
                twist_idx.insert((c.id, f), twists.len());
                twists.push(TwistVar {
                    cluster: c.id,
                    frame_index: f,
                    snapshot: c.poses[&f],
                    coords: DVector::zeros(joint.dof()),
                    basis: basis.clone(),
                    fixed: k == 0,
                });
            }
            clusters.insert(c.id, ClusterJoint::new(joint.clone(), &cfg.weights)?);
        }
    }

    // Candidate observations, then the observation-count filter.
    enum Cand {
        Stat(usize, PointId, Vector3<f64>),
        Dyna(usize, usize, PointId, Vector3<f64>),
    }
    let mut cands = Vec::new();
    let mut counts: BTreeMap<PointId, usize> = BTreeMap::new();
    for (&f, &ci) in &cam_idx {
        for o in &map.keyframes[&f].observations {
            let Some(p) = map.points.get(&o.point_id) else { continue };
            let Some(owner) = map.clusters.get(&p.owner_cluster) else { continue };
            let cand = if owner.is_static {
                Cand::Stat(ci, p.id, o.stereo_pixel())
            } else if let Some(&ti) = twist_idx.get(&(owner.id, f)) {
                Cand::Dyna(ci, ti, p.id, o.stereo_pixel())
            } else {
                continue;
            };
            *counts.entry(p.id).or_insert(0) += 1;
            cands.push(cand);
        }
    }
    let mut points = Vec::new();
    let mut point_idx: BTreeMap<PointId, usize> = BTreeMap::new();
    let mut point_of = |id: PointId| -> usize {
        *point_idx.entry(id).or_insert_with(|| {
            let p = &map.points[&id];
            let owner = &map.clusters[&p.owner_cluster];
            points.push(PointVar {
                point_id: id,
                cluster: (!owner.is_static).then_some(owner.id),
                position: p.position,
            });
            points.len() - 1
        })
    };
    let mut stat = Vec::new();
    let mut dyna = Vec::new();
    for c in cands {
        match c {
            Cand::Stat(ci, pid, z) if counts[&pid] >= cfg.min_observations => {
                stat.push(StatBlock {
                    camera: ci,
                    point: point_of(pid),
                    z,
                });
            }
            Cand::Dyna(ci, ti, pid, z) if counts[&pid] >= cfg.min_observations => {
                dyna.push(DynaBlock {
                    camera: ci,
                    twist: ti,
                    point: point_of(pid),
                    z,
                });
            }
            _ => {}
        }
    }

    let mut constvel = Vec::new();
    if cfg.use_constvel {
        for &cid in clusters.keys() {
            let seq: Vec<(usize, usize)> = twist_idx
                .iter()
                .filter(|((c, _), _)| *c == cid)
                .map(|((_, f), &i)| (*f, i))
                .collect();
            for w in seq.windows(3) {
                constvel.push(ConstVelBlock {
                    cluster: cid,
                    twists: [w[0].1, w[1].1, w[2].1],
                    frames: [w[0].0, w[1].0, w[2].0],
                });
            }
        }
    }

    let problem = BAProblem {
        cameras,
        twists,
        points,
        stat,
        dyna,
        constvel,
        clusters,
        weights: cfg.weights,
    };
    problem.validate()?;
    Ok(problem)
}

/// Writes optimized variables back into the map. Object twists of the
/// affected frames are recomputed from consecutive poses.
pub fn apply_to_map(problem: &BAProblem, map: &mut WorldMap) {
    for c in &problem.cameras {
        if let Some(kf) = map.keyframes.get_mut(&c.frame_index) {
            kf.pose = c.pose;
        }
    }
    let mut touched: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
    for t in &problem.twists {
        if let Some(c) = map.clusters.get_mut(&t.cluster) {
            c.poses.insert(t.frame_index, t.pose());
            touched.entry(t.cluster).or_default().push(t.frame_index);
        }
    }
    for (cid, frames) in touched {
        let Some(c) = map.clusters.get_mut(&cid) else { continue };
        let p = problem.clusters.get(&cid).and_then(|cj| crate::joints::conjugated_projector(&cj.joint).ok());
        let last = frames.iter().max().copied().unwrap_or(0);
        let affected: Vec<usize> = c
            .poses
            .range(frames.iter().min().copied().unwrap_or(0)..=last + 1)
            .map(|(f, _)| *f)
            .collect();
        for f in affected {
            let Some((_, prev)) = c.poses.range(..f).next_back() else { continue };
            let rel = c.poses[&f].compose(&prev.inverse());
            if let Ok(xi) = log_se3(&rel) {
                let x = match &p {
                    Some(p) => p.p_world * xi.to_vector(),
                    None => xi.to_vector(),
                };
                c.twists.insert(f, Twist::from_vector(&x));
            }
        }
    }
    for pv in &problem.points {
        if let Some(mp) = map.points.get_mut(&pv.point_id) {
            mp.position = pv.position;
        }
    }
}

/// Camera model needed by the residuals; kept separate from the problem so
/// dumps stay camera-agnostic.
pub fn problem_cost(problem: &BAProblem, cam: &PinholeCamera, cfg: &BaConfig) -> f64 {
    solver::evaluate_cost(problem, cam, cfg)
}
