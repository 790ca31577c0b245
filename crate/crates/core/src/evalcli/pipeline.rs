use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynba::{apply_to_map, build_problem, solve_ba, BaConfig};
use crate::error::{Error, Result};
use crate::joints::{joint_from_plane, JointSpec, JointTable, JointType};
use crate::liegroup::{exp_se3, log_se3, Pose, Twist};
use crate::scenegeom::{fit_plane_ransac, fit_plane_weighted, triangulate_stereo, PlaneModel, RansacParams, StereoObservation};
use crate::simkit::{associate, render_observations, GroundTruth, SceneConfig};
use crate::tracking::{
    coast, refine_with_map_projection, track_camera, track_object_twist, ObjectTrackInput, PixelMatch,
    RobustConfig, MIN_OBJECT_MATCHES,
};
use crate::worldmodel::{fuse_semantic_vote, ClassTable, Cluster, ClusterId, KeyframePolicy, MapPoint, PointId, WorldMap};

/// Pipeline settings, loadable from TOML. Missing keys take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// When false every joint is replaced by a free joint.
    pub constrained: bool,
    /// Emit per-frame CSV tables.
    pub csv: bool,
    /// Run BA every this many frames; 0 disables it.
    pub ba_interval: usize,
    /// Number of most recent temporal keyframes in each BA.
    pub ba_window: usize,
    /// Number of most recent spatial keyframes added to each BA.
    pub max_spatial: usize,
    pub refine_radius_px: f64,
    /// New points farther than this are not triangulated.
    pub max_triangulation_depth: f64,
    /// Objects are first instantiated at this frame, once the static map
    /// has settled.
    pub object_start_frame: usize,
    pub robust: RobustConfig,
    pub ba: BaConfig,
    pub keyframes: KeyframePolicy,
    pub ransac: RansacParams,
    pub joints: JointTable,
    pub classes: ClassTable,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            constrained: true,
            csv: false,
            ba_interval: 5,
            ba_window: 10,
            max_spatial: 3,
            refine_radius_px: 3.0,
            max_triangulation_depth: 40.0,
            object_start_frame: 6,
            robust: RobustConfig::default(),
            ba: BaConfig {
                convergence_tol: 1e-6,
                ..BaConfig::default()
            },
            keyframes: KeyframePolicy::default(),
            ransac: RansacParams::default(),
            joints: JointTable::default(),
            classes: ClassTable::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.robust.validate()?;
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.ba_interval > 0 && self.ba_window < 3 {
            return bad("ba_window must be at least 3");
        }
        if !(self.refine_radius_px >= 0.0) {
            return bad("refine_radius_px must be non-negative");
        }
        if !(self.max_triangulation_depth > 0.0) {
            return bad("max_triangulation_depth must be positive");
        }
        if self.ba.outer_rounds == 0 || self.ba.max_iters == 0 {
            return bad("BA needs at least one round and one iteration");
        }
        Ok(())
    }
}

/// Estimated trajectories of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    /// Camera poses `T_wc` per frame.
    pub camera: BTreeMap<usize, Pose>,
    /// Object poses `T_wo` per cluster and frame.
    pub objects: BTreeMap<ClusterId, BTreeMap<usize, Pose>>,
    /// World twists per cluster and frame.
    pub twists: BTreeMap<ClusterId, BTreeMap<usize, Twist>>,
    pub joints: BTreeMap<ClusterId, JointSpec>,
    pub class_labels: BTreeMap<ClusterId, String>,
    pub ba_runs: usize,
}

struct Tracker<'a> {
    cfg: &'a PipelineConfig,
    scene: &'a SceneConfig,
    gt: &'a GroundTruth,
    map: WorldMap,
    next_point: PointId,
    prev_obs: Vec<StereoObservation>,
    prev_ids: Vec<Option<PointId>>,
    /// `T_cw` per frame.
    cam: BTreeMap<usize, Pose>,
    retired: BTreeMap<ClusterId, Cluster>,
    ba_runs: usize,
}

/// Runs tracking, mapping and windowed BA over every frame of `gt`.
pub fn run_pipeline(gt: &GroundTruth, scene: &SceneConfig, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut t = Tracker {
        cfg,
        scene,
        gt,
        map: WorldMap::new(cfg.keyframes),
        next_point: 0,
        prev_obs: Vec::new(),
        prev_ids: Vec::new(),
        cam: BTreeMap::new(),
        retired: BTreeMap::new(),
        ba_runs: 0,
    };
    for k in 0..gt.frames.len() {
        t.step(k).map_err(|e| e.at_frame(k))?;
    }
    Ok(t.finish())
}

impl Tracker<'_> {
    fn label_of(&self, cluster: ClusterId) -> String {
        self.gt.class_of(cluster).unwrap_or("unknown").to_string()
    }

    fn step(&mut self, k: usize) -> Result<()> {
        let obs = render_observations(self.gt, k, self.scene);
        let mut ids = self.carry_ids(&obs);

        let t_cw = self.track_camera(k, &obs, &ids)?;
        self.cam.insert(k, t_cw);
        self.track_objects(k, &t_cw, &obs, &mut ids)?;
        // Static structure first: new objects take their joint plane from it.
        self.spawn_clusters(k, &t_cw, &obs, false);
        self.triangulate(k, &t_cw, &obs, &mut ids);
        if k >= self.cfg.object_start_frame {
            self.spawn_clusters(k, &t_cw, &obs, true);
            self.triangulate(k, &t_cw, &obs, &mut ids);
        }
        self.vote(&obs, &ids);
        self.retire_lost();

        let kf_obs: Vec<StereoObservation> = obs
            .iter()
            .zip(&ids)
            .filter_map(|(o, id)| id.map(|pid| StereoObservation { point_id: pid, ..*o }))
            .collect();
        let ts = self.gt.frames[k].timestamp;
        self.map.promote_temporal_keyframe(k, ts, t_cw, &kf_obs);
        self.map.cull_keyframes(ts);
        if self.cfg.ba_interval > 0 && k > 0 && k % self.cfg.ba_interval == 0 {
            self.bundle_adjust()?;
        }
        self.prev_obs = obs;
        self.prev_ids = ids;
        Ok(())
    }

    /// Map point ids carried from the previous frame through the associations.
    fn carry_ids(&self, obs: &[StereoObservation]) -> Vec<Option<PointId>> {
        let mut ids = vec![None; obs.len()];
        if self.prev_obs.is_empty() {
            return ids;
        }
        for a in associate(&self.prev_obs, obs, self.scene) {
            let Some(pid) = self.prev_ids[a.prev] else { continue };
            if ids[a.curr].is_none() && self.map.points.contains_key(&pid) {
                ids[a.curr] = Some(pid);
            }
        }
        ids
    }

    fn track_camera(&self, k: usize, obs: &[StereoObservation], ids: &[Option<PointId>]) -> Result<Pose> {
        if k == 0 {
            return Ok(self.gt.frames[0].t_wc.inverse());
        }
        let prev = self.cam[&(k - 1)];
        // Constant velocity through the exponential keeps the rotation orthonormal.
        let pred = match self.cam.get(&k.wrapping_sub(2)) {
            Some(pp) => match log_se3(&prev.compose(&pp.inverse())) {
                Ok(xi) => exp_se3(&xi).compose(&prev),
                Err(_) => prev,
            },
            None => prev,
        };
        let matches: Vec<PixelMatch> = obs
            .iter()
            .zip(ids)
            .filter_map(|(o, id)| {
                let pid = (*id)?;
                self.map.point_is_static(pid).then_some(PixelMatch {
                    point_id: pid,
                    pixel: o.pixel(),
                })
            })
            .collect();
        Ok(track_camera(&matches, &self.map, &self.scene.camera, &pred, &self.cfg.robust)?.estimate)
    }

    fn track_objects(
        &mut self,
        k: usize,
        t_cw: &Pose,
        obs: &[StereoObservation],
        ids: &mut [Option<PointId>],
    ) -> Result<()> {
        let dynamic: Vec<ClusterId> = self.map.dynamic_clusters().map(|c| c.id).collect();
        for cid in dynamic {
            let cluster = &self.map.clusters[&cid];
            let Some(joint) = cluster.joint.clone() else { continue };
            let Some((_, prev_pose)) = cluster.latest_pose() else { continue };
            let prev_coords = cluster
                .latest_twist()
                .map(|(_, xi)| joint.joint_coords(&xi))
                .unwrap_or_else(|| DVector::zeros(joint.dof()));
            let points: BTreeMap<PointId, Vector3<f64>> = cluster
                .points
                .iter()
                .filter_map(|p| self.map.points.get(p).map(|mp| (*p, mp.position)))
                .collect();
            let matches: Vec<PixelMatch> = obs
                .iter()
                .zip(ids.iter())
                .filter_map(|(o, id)| {
                    let pid = (*id)?;
                    points.contains_key(&pid).then_some(PixelMatch {
                        point_id: pid,
                        pixel: o.pixel(),
                    })
                })
                .collect();
            let input = ObjectTrackInput {
                cam: &self.scene.camera,
                t_cw,
                prev_pose: &prev_pose,
                joint: &joint,
                points: &points,
                init_coords: Some(&prev_coords),
            };
            let mut result = if matches.len() >= MIN_OBJECT_MATCHES {
                track_object_twist(&input, &matches, &self.cfg.robust)
                    .unwrap_or_else(|_| coast(&prev_pose, &prev_coords, &joint))
            } else {
                coast(&prev_pose, &prev_coords, &joint)
            };
            if !result.coasted {
                let cand_idx: Vec<usize> = (0..obs.len())
                    .filter(|&i| obs[i].cluster_id == cid && ids[i].is_none())
                    .collect();
                let candidates: Vec<StereoObservation> = cand_idx.iter().map(|&i| obs[i]).collect();
                let (refined, extended) = refine_with_map_projection(
                    &input,
                    &matches,
                    &candidates,
                    &result,
                    self.cfg.refine_radius_px,
                    &self.cfg.robust,
                );
                for m in &extended[matches.len()..] {
                    if let Some(pos) = candidates.iter().position(|c| c.pixel() == m.pixel) {
                        ids[cand_idx[pos]] = Some(m.point_id);
                    }
                }
                result = refined;
            }
            let c = self.map.clusters.get_mut(&cid).expect("cluster listed above");
            c.set_state(k, result.estimate.pose, result.estimate.twist);
            c.untracked_frames = if result.coasted { c.untracked_frames + 1 } else { 0 };
        }
        Ok(())
    }

    fn back_project(&self, t_wc: &Pose, o: &StereoObservation) -> Option<Vector3<f64>> {
        let xc = triangulate_stereo(&self.scene.camera, o).ok()?;
        (xc.z <= self.cfg.max_triangulation_depth).then(|| t_wc.transform_point(&xc))
    }

    /// Fits the parent plane of a new dynamic cluster from static map points.
    /// RANSAC for inliers, then a refit weighted by `1/d^2` from `eye`: stereo
    /// depth noise grows as `d^2` and projects onto the road normal by `h/d`.
    fn parent_plane(&self, parent: &str, eye: &Vector3<f64>) -> Option<PlaneModel> {
        let pts: Vec<Vector3<f64>> = self
            .map
            .points
            .values()
            .filter(|p| {
                self.map
                    .clusters
                    .get(&p.owner_cluster)
                    .is_some_and(|c| c.is_static && c.class_label == parent)
            })
            .map(|p| p.position)
            .collect();
        let (plane, inliers) = fit_plane_ransac(&pts, &self.cfg.ransac).ok()?;
        let (ip, w): (Vec<_>, Vec<_>) = pts
            .iter()
            .zip(&inliers)
            .filter(|(_, keep)| **keep)
            .map(|(p, _)| (*p, 1.0 / (p - eye).norm_squared().max(1.0)))
            .unzip();
        Some(fit_plane_weighted(&ip, &w).unwrap_or(plane))
    }

    fn spawn_clusters(&mut self, k: usize, t_cw: &Pose, obs: &[StereoObservation], dynamic: bool) {
        let t_wc = t_cw.inverse();
        let mut seen: BTreeMap<ClusterId, Vec<Vector3<f64>>> = BTreeMap::new();
        for o in obs {
            if self.map.clusters.contains_key(&o.cluster_id) || self.retired.contains_key(&o.cluster_id) {
                continue;
            }
            let entry = seen.entry(o.cluster_id).or_default();
            if let Some(x) = self.back_project(&t_wc, o) {
                entry.push(x);
            }
        }
        for (cid, pts) in seen {
            let label = self.label_of(cid);
            if self.cfg.classes.is_dynamic(&label) != dynamic {
                continue;
            }
            if !dynamic {
                self.map.insert_cluster(Cluster::new_static(cid, label));
                continue;
            }
            if pts.len() < MIN_OBJECT_MATCHES {
                continue;
            }
            let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            let (parent, jtype) = self.cfg.joints.lookup(&label);
            let jtype = if self.cfg.constrained { jtype } else { JointType::Free };
            let parent = parent.map(str::to_string);
            let joint = match parent.as_deref().and_then(|p| self.parent_plane(p, &t_wc.translation)) {
                Some(plane) => joint_from_plane(&plane, jtype, &centroid).map(|mut j| {
                    j.parent_class = parent.clone().unwrap_or_default();
                    j.child_class = label.clone();
                    j
                }),
                None => Err(Error::DegeneratePlane),
            }
            .unwrap_or_else(|_| {
                JointSpec::new(JointType::Free, Pose::from_translation(centroid), "", label.clone())
            });
            let mut c = Cluster::new_dynamic(cid, label, k, Pose::from_translation(centroid));
            c.joint = Some(joint);
            self.map.insert_cluster(c);
        }
    }

    fn triangulate(&mut self, k: usize, t_cw: &Pose, obs: &[StereoObservation], ids: &mut [Option<PointId>]) {
        let t_wc = t_cw.inverse();
        for (o, id) in obs.iter().zip(ids.iter_mut()) {
            if id.is_some() {
                continue;
            }
            let Some(cluster) = self.map.clusters.get(&o.cluster_id) else { continue };
            let Some(xw) = self.back_project(&t_wc, o) else { continue };
            let position = if cluster.is_static {
                xw
            } else {
                match cluster.poses.get(&k) {
                    Some(t_wo) => t_wo.inverse().transform_point(&xw),
                    None => continue,
                }
            };
            let pid = self.next_point;
            self.next_point += 1;
            self.map
                .insert_point(MapPoint::new(pid, position, o.cluster_id))
                .expect("owner cluster exists");
            *id = Some(pid);
        }
    }

    fn vote(&mut self, obs: &[StereoObservation], ids: &[Option<PointId>]) {
        for (o, id) in obs.iter().zip(ids) {
            let label = self.label_of(o.cluster_id);
            if let Some(p) = id.and_then(|pid| self.map.points.get_mut(&pid)) {
                fuse_semantic_vote(p, &label);
            }
        }
    }

    fn retire_lost(&mut self) {
        let lost: Vec<ClusterId> = self
            .map
            .dynamic_clusters()
            .filter(|c| c.untracked_frames > self.map.policy.lost_after)
            .map(|c| c.id)
            .collect();
        for cid in lost {
            if let Some(c) = self.map.drop_cluster(cid) {
                self.retired.insert(cid, c);
            }
        }
    }

    fn bundle_adjust(&mut self) -> Result<()> {
        let temporal: Vec<usize> = self.map.temporal_keyframes().map(|k| k.frame_index).collect();
        let temporal = &temporal[temporal.len().saturating_sub(self.cfg.ba_window)..];
        let spatial: Vec<usize> = self.map.spatial_keyframes().map(|k| k.frame_index).collect();
        let spatial = &spatial[spatial.len().saturating_sub(self.cfg.max_spatial)..];
        let mut problem = match build_problem(&self.map, temporal, spatial, &self.cfg.ba) {
            Ok(p) => p,
            Err(Error::EmptyWindow) => return Ok(()),
            Err(e) => return Err(e),
        };
        match solve_ba(&mut problem, &self.scene.camera, &self.cfg.ba) {
            Ok(_) => {}
            Err(Error::Diverged { .. }) => return Ok(()),
            Err(e) => return Err(e),
        }
        apply_to_map(&problem, &mut self.map);
        for c in &problem.cameras {
            self.cam.insert(c.frame_index, c.pose);
        }
        self.ba_runs += 1;
        Ok(())
    }

    fn finish(self) -> PipelineOutput {
        let mut out = PipelineOutput {
            camera: self.cam.iter().map(|(k, p)| (*k, p.inverse())).collect(),
            objects: BTreeMap::new(),
            twists: BTreeMap::new(),
            joints: BTreeMap::new(),
            class_labels: BTreeMap::new(),
            ba_runs: self.ba_runs,
        };
        let live: BTreeSet<ClusterId> = self.map.dynamic_clusters().map(|c| c.id).collect();
        let clusters = self
            .retired
            .values()
            .chain(self.map.clusters.values().filter(|c| live.contains(&c.id)));
        for c in clusters {
            out.objects.insert(c.id, c.poses.clone());
            out.twists.insert(c.id, c.twists.clone());
            if let Some(j) = &c.joint {
                out.joints.insert(c.id, j.clone());
            }
            out.class_labels.insert(c.id, c.class_label.clone());
        }
        out
    }
}
