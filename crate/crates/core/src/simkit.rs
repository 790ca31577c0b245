//! Deterministic synthetic stereo scenes.
//!
//! A scene is a road plane with static structure, a stereo camera driven by a
//! body-frame twist schedule, and rigid objects driven by piecewise-constant
//! joint-frame twist schedules. Rendering adds pixel noise and gross outliers;
//! [`associate`] stands in for a learned matcher and can corrupt matches.
//!
//! All randomness comes from the scene seed through named substreams, so
//! changing one channel (say, the outlier fraction) leaves the others intact.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joints::{freedom_basis, joint_from_plane, projector, JointSpec, JointType};
use crate::liegroup::{adjoint, exp_se3, Pose, Twist};
use crate::scenegeom::{PinholeCamera, PlaneModel, StereoObservation, MIN_DEPTH};
use crate::worldmodel::{Cluster, ClusterId, MapPoint, PointId, WorldMap};

/// A constant twist applied on frames `start..end` (transition into frame `k`
/// uses the segment containing `k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistSegment {
    pub start: usize,
    pub end: usize,
    /// `(v_x, v_y, v_z, w_x, w_y, w_z)` per frame.
    pub twist: [f64; 6],
}

/// Segment end used for "until the end of the sequence".
pub const OPEN_END: usize = 1_000_000;

fn scheduled_twist(schedule: &[TwistSegment], default: &[f64; 6], k: usize) -> Twist {
    let t = schedule
        .iter()
        .find(|s| (s.start..s.end).contains(&k))
        .map(|s| &s.twist)
        .unwrap_or(default);
    Twist::from_array(*t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    /// Axis times angle, radians.
    #[serde(default)]
    pub rotation_vector: [f64; 3],
}

impl PoseSpec {
    pub fn pose(&self) -> Pose {
        Pose::from_rotation_vector(self.rotation_vector.into(), self.translation.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticClusterSpec {
    pub id: ClusterId,
    pub class_label: String,
    pub n_points: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Snap sampled points onto the road plane.
    #[serde(default)]
    pub on_road: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScript {
    pub id: ClusterId,
    pub class_label: String,
    pub joint: JointType,
    /// Initial `T_wo`; the joint frame sits under it on the road plane.
    pub initial_pose: PoseSpec,
    /// Joint-frame twists. Frames outside every segment use zero.
    #[serde(default)]
    pub schedule: Vec<TwistSegment>,
    /// Box extents `(length, width, height)`; the object origin is the
    /// center of the bottom face.
    pub bbox: [f64; 3],
    pub n_points: usize,
    /// Explicit object-frame points; sampled on the box surface when empty.
    #[serde(default)]
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub frame_rate: f64,
    pub camera: PinholeCamera,
    pub camera_start: PoseSpec,
    /// Body-frame camera twist used outside the schedule.
    pub camera_twist: [f64; 6],
    pub camera_path: Vec<TwistSegment>,
    pub road_plane: [f64; 4],
    pub static_clusters: Vec<StaticClusterSpec>,
    pub dynamic_objects: Vec<ObjectScript>,
    pub pixel_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub association_corruption: f64,
    pub far_spawn_distance: f64,
}

/// Camera looking along world `+x` from height 1.6 m (world `z` up).
fn forward_camera_rotation() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

impl Default for SceneConfig {
    fn default() -> Self {
        let car = |id, pos: [f64; 3], twist: [f64; 6]| ObjectScript {
            id,
            class_label: "car".into(),
            joint: JointType::Planar,
            initial_pose: PoseSpec {
                translation: pos,
                rotation_vector: [0.0; 3],
            },
            schedule: vec![TwistSegment {
                start: 0,
                end: OPEN_END,
                twist,
            }],
            bbox: [4.0, 1.8, 1.5],
            n_points: 80,
            points: Vec::new(),
        };
        let rotvec = nalgebra::Rotation3::from_matrix_unchecked(forward_camera_rotation()).scaled_axis();
        Self {
            seed: 0,
            n_frames: 100,
            frame_rate: 10.0,
            camera: PinholeCamera::default(),
            camera_start: PoseSpec {
                translation: [0.0, 0.0, 1.6],
                rotation_vector: rotvec.into(),
            },
            camera_twist: [0.0, 0.0, 0.2, 0.0, 0.0, 0.0],
            camera_path: vec![TwistSegment {
                start: 40,
                end: 70,
                twist: [0.0, 0.0, 0.2, 0.0, -0.002, 0.0],
            }],
            road_plane: [0.0, 0.0, 1.0, 0.0],
            static_clusters: vec![
                StaticClusterSpec {
                    id: 1,
                    class_label: "road".into(),
                    n_points: 600,
                    min: [3.0, -7.0, 0.0],
                    max: [60.0, 7.0, 0.0],
                    on_road: true,
                },
                StaticClusterSpec {
                    id: 2,
                    class_label: "building".into(),
                    n_points: 200,
                    min: [0.0, 8.0, 0.0],
                    max: [60.0, 8.0, 8.0],
                    on_road: false,
                },
                StaticClusterSpec {
                    id: 3,
                    class_label: "building".into(),
                    n_points: 200,
                    min: [0.0, -8.0, 0.0],
                    max: [60.0, -8.0, 8.0],
                    on_road: false,
                },
            ],
            dynamic_objects: vec![
                car(10, [8.0, -3.0, 0.0], [0.3, 0.0, 0.0, 0.0, 0.0, 0.0]),
                car(11, [12.0, 3.0, 0.0], [0.2, 0.0, 0.0, 0.0, 0.0, 0.002]),
                car(12, [30.0, -3.5, 0.0], [0.0; 6]),
            ],
            pixel_noise_sigma: 0.5,
            outlier_fraction: 0.0,
            association_corruption: 0.0,
            far_spawn_distance: 40.0,
        }
    }
}

impl SceneConfig {
    /// Default scene with every noise channel switched off.
    pub fn noiseless() -> Self {
        Self {
            pixel_noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn road(&self) -> Result<PlaneModel> {
        PlaneModel::new(Vector4::from(self.road_plane))
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        for (name, f) in [
            ("outlier_fraction", self.outlier_fraction),
            ("association_corruption", self.association_corruption),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return bad("pixel_noise_sigma must be non-negative");
        }
        if !(self.frame_rate > 0.0) || self.n_frames == 0 {
            return bad("frame_rate and n_frames must be positive");
        }
        self.camera.validate()?;
        let road = self.road()?;
        if road.pi[2].abs() < 1e-6 {
            return bad("road plane must not be vertical");
        }
        let mut ids: Vec<ClusterId> = self.static_clusters.iter().map(|c| c.id).collect();
        ids.extend(self.dynamic_objects.iter().map(|o| o.id));
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return bad("cluster ids must be unique");
        }
        for o in &self.dynamic_objects {
            let pi = projector(&freedom_basis(o.joint))?;
            for s in &o.schedule {
                let x = Twist::from_array(s.twist).to_vector();
                if (pi * x - x).amax() > 1e-12 {
                    return bad(&format!(
                        "object {} schedule twist leaves the {} freedom space",
                        o.id, o.joint
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTruth {
    pub id: ClusterId,
    pub class_label: String,
    pub is_static: bool,
    pub joint: Option<JointType>,
    /// `T_wl` of the scripted joint.
    pub joint_frame: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTruth {
    pub id: PointId,
    pub cluster_id: ClusterId,
    /// World frame for static clusters, object frame for dynamic ones.
    pub position: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub index: usize,
    pub timestamp: f64,
    /// `T_wc`.
    pub t_wc: Pose,
    /// `T_wo` per dynamic cluster.
    pub object_poses: BTreeMap<ClusterId, Pose>,
    /// Joint-frame twist that moved each object into this frame.
    pub object_twists: BTreeMap<ClusterId, Twist>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub road_plane: PlaneModel,
    pub clusters: BTreeMap<ClusterId, ClusterTruth>,
    pub points: Vec<PointTruth>,
    pub frames: Vec<FrameTruth>,
}

impl GroundTruth {
    pub fn world_point(&self, p: &PointTruth, frame: usize) -> Vector3<f64> {
        match self.frames[frame].object_poses.get(&p.cluster_id) {
            Some(t) => t.transform_point(&p.position),
            None => p.position,
        }
    }

    pub fn class_of(&self, cluster: ClusterId) -> Option<&str> {
        self.clusters.get(&cluster).map(|c| c.class_label.as_str())
    }
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for a named channel and frame.
pub fn substream(seed: u64, channel: &str, frame: usize) -> ChaCha8Rng {
    let s = splitmix(splitmix(seed ^ fnv1a(channel)) ^ frame as u64);
    ChaCha8Rng::seed_from_u64(s)
}

fn sample_box_surface(rng: &mut ChaCha8Rng, bbox: &[f64; 3]) -> Vector3<f64> {
    let [l, w, h] = *bbox;
    let areas = [w * h, w * h, l * h, l * h, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let a = rng.random_range(-0.5..0.5);
    let b = rng.random_range(-0.5..0.5);
    match face {
        0 => Vector3::new(0.5 * l, a * w, (b + 0.5) * h),
        1 => Vector3::new(-0.5 * l, a * w, (b + 0.5) * h),
        2 => Vector3::new(a * l, 0.5 * w, (b + 0.5) * h),
        3 => Vector3::new(a * l, -0.5 * w, (b + 0.5) * h),
        _ => Vector3::new(a * l, b * w, h),
    }
}

/// Integrates the camera and object scripts over all frames.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let road = cfg.road()?;
    let mut rng = substream(cfg.seed, "structure", 0);
    let mut points = Vec::new();
    let mut clusters = BTreeMap::new();
    let mut next_id: PointId = 0;

    for sc in &cfg.static_clusters {
        clusters.insert(
            sc.id,
            ClusterTruth {
                id: sc.id,
                class_label: sc.class_label.clone(),
                is_static: true,
                joint: None,
                joint_frame: None,
            },
        );
        for _ in 0..sc.n_points {
            let mut p = Vector3::from_fn(|i, _| {
                if sc.max[i] > sc.min[i] {
                    rng.random_range(sc.min[i]..sc.max[i])
                } else {
                    sc.min[i]
                }
            });
            if sc.on_road {
                p.z = -(road.pi[0] * p.x + road.pi[1] * p.y + road.pi[3]) / road.pi[2];
            }
            points.push(PointTruth {
                id: next_id,
                cluster_id: sc.id,
                position: p,
            });
            next_id += 1;
        }
    }

    let mut world_twists = BTreeMap::new();
    let mut poses = BTreeMap::new();
    for o in &cfg.dynamic_objects {
        let initial = o.initial_pose.pose();
        let mut frame = joint_from_plane(&road, o.joint, &initial.translation)?.frame;
        // Align the joint x axis with the object's heading projected on the plane.
        let n: Vector3<f64> = frame.rotation.column(2).into_owned();
        let heading = initial.rotation.column(0).into_owned();
        let x = heading - n * n.dot(&heading);
        if x.norm() > 1e-9 {
            let x = x.normalize();
            frame.rotation = Matrix3::from_columns(&[x, n.cross(&x), n]);
        }
        clusters.insert(
            o.id,
            ClusterTruth {
                id: o.id,
                class_label: o.class_label.clone(),
                is_static: false,
                joint: Some(o.joint),
                joint_frame: Some(frame),
            },
        );
        world_twists.insert(o.id, (adjoint(&frame), o.schedule.clone()));
        poses.insert(o.id, initial);
        if o.points.is_empty() {
            for _ in 0..o.n_points {
                points.push(PointTruth {
                    id: next_id,
                    cluster_id: o.id,
                    position: sample_box_surface(&mut rng, &o.bbox),
                });
                next_id += 1;
            }
        } else {
            for p in &o.points {
                points.push(PointTruth {
                    id: next_id,
                    cluster_id: o.id,
                    position: Vector3::from(*p),
                });
                next_id += 1;
            }
        }
    }

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut t_wc = cfg.camera_start.pose();
    for k in 0..cfg.n_frames {
        let mut twists = BTreeMap::new();
        if k > 0 {
            let body = scheduled_twist(&cfg.camera_path, &cfg.camera_twist, k);
            t_wc = t_wc.compose(&exp_se3(&body));
            for (id, (ad, schedule)) in &world_twists {
                let local = scheduled_twist(schedule, &[0.0; 6], k);
                let pose = poses.get_mut(id).expect("object pose");
                *pose = exp_se3(&ad.apply(&local)).compose(pose);
                twists.insert(*id, local);
            }
        } else {
            for id in world_twists.keys() {
                twists.insert(*id, Twist::zero());
            }
        }
        frames.push(FrameTruth {
            index: k,
            timestamp: k as f64 * cfg.frame_period(),
            t_wc,
            object_poses: poses.clone(),
            object_twists: twists,
        });
    }
    Ok(GroundTruth {
        road_plane: road,
        clusters,
        points,
        frames,
    })
}

/// Projects every visible point into `frame` with noise and outliers.
pub fn render_observations(
    gt: &GroundTruth,
    frame: usize,
    cfg: &SceneConfig,
) -> Vec<StereoObservation> {
    let cam = &cfg.camera;
    let t_cw = gt.frames[frame].t_wc.inverse();
    let mut noise_rng = substream(cfg.seed, "noise", frame);
    let mut outlier_rng = substream(cfg.seed, "outliers", frame);
    let normal = Normal::new(0.0, cfg.pixel_noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut out = Vec::new();
    for p in &gt.points {
        let xc = t_cw.transform_point(&gt.world_point(p, frame));
        if xc.z <= MIN_DEPTH {
            continue;
        }
        let Ok(px) = cam.project_camera_point(&xc) else {
            continue;
        };
        if !cam.in_image(&px) {
            continue;
        }
        let mut o = StereoObservation {
            u: px.x,
            v: px.y,
            disparity: cam.disparity(xc.z),
            point_id: p.id,
            cluster_id: p.cluster_id,
            frame_index: frame,
        };
        if cfg.pixel_noise_sigma > 0.0 {
            o.u += normal.sample(&mut noise_rng);
            o.v += normal.sample(&mut noise_rng);
            o.disparity += normal.sample(&mut noise_rng);
        }
        if cfg.outlier_fraction > 0.0 && outlier_rng.random_bool(cfg.outlier_fraction) {
            o.u = outlier_rng.random_range(0.0..cam.width as f64);
            o.v = outlier_rng.random_range(0.0..cam.height as f64);
        }
        out.push(o);
    }
    out
}

/// A correspondence between an observation in the previous frame and one in
/// the current frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    pub prev: usize,
    pub curr: usize,
}

/// Id-based matches between two frames. A fraction of them is rewired to
/// another current observation of the same cluster.
pub fn associate(
    prev: &[StereoObservation],
    curr: &[StereoObservation],
    cfg: &SceneConfig,
) -> Vec<Association> {
    let frame = curr.first().map(|o| o.frame_index).unwrap_or(0);
    let mut rng = substream(cfg.seed, "association", frame);
    let by_id: BTreeMap<PointId, usize> = curr.iter().enumerate().map(|(i, o)| (o.point_id, i)).collect();
    let mut by_cluster: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
    for (i, o) in curr.iter().enumerate() {
        by_cluster.entry(o.cluster_id).or_default().push(i);
    }
    let mut out = Vec::new();
    for (pi, po) in prev.iter().enumerate() {
        let Some(&ci) = by_id.get(&po.point_id) else {
            continue;
        };
        let mut curr_idx = ci;
        if cfg.association_corruption > 0.0 && rng.random_bool(cfg.association_corruption) {
            let pool = &by_cluster[&curr[ci].cluster_id];
            if pool.len() > 1 {
                let own = pool.binary_search(&ci).expect("observation is in its cluster pool");
                let k = rng.random_range(0..pool.len() - 1);
                curr_idx = pool[if k >= own { k + 1 } else { k }];
            }
        }
        out.push(Association {
            prev: pi,
            curr: curr_idx,
        });
    }
    out
}

/// World map built directly from ground truth over `frames`: exact camera
/// poses, exact points, scripted object poses and joints, and the rendered
/// observations of each frame as temporal keyframes.
pub fn ground_truth_map(gt: &GroundTruth, cfg: &SceneConfig, frames: &[usize]) -> Result<WorldMap> {
    let mut map = WorldMap::default();
    for c in gt.clusters.values() {
        let cluster = if c.is_static {
            Cluster::new_static(c.id, c.class_label.clone())
        } else {
            let jtype = c.joint.unwrap_or(JointType::Free);
            let frame = c.joint_frame.unwrap_or_default();
            let joint = JointSpec::new(jtype, frame, "road", c.class_label.clone());
            let ad = adjoint(&frame);
            let mut cl = Cluster::new_static(c.id, c.class_label.clone());
            cl.is_static = false;
            for &f in frames {
                let local = gt.frames[f].object_twists.get(&c.id).copied().unwrap_or_default();
                cl.set_state(f, gt.frames[f].object_poses[&c.id], ad.apply(&local));
            }
            cl.joint = Some(joint);
            cl
        };
        map.insert_cluster(cluster);
    }
    for p in &gt.points {
        map.insert_point(MapPoint::new(p.id, p.position, p.cluster_id))?;
    }
    for &f in frames {
        let obs = render_observations(gt, f, cfg);
        map.promote_temporal_keyframe(f, gt.frames[f].timestamp, gt.frames[f].t_wc.inverse(), &obs);
    }
    Ok(map)
}
