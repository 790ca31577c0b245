//! Semantic map: clusters, map points and keyframes.
//!
//! Static clusters own world-frame points. Dynamic clusters own object-frame
//! points plus a per-frame pose and twist history. Every frame becomes a
//! temporal keyframe; after leaving the temporal window a keyframe either
//! survives as a spatial keyframe (covisibility anchor) or is deleted.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joints::JointSpec;
use crate::liegroup::{Pose, Twist};
use crate::scenegeom::StereoObservation;

pub type ClusterId = u64;
pub type PointId = u64;

pub const MAP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: ClusterId,
    pub class_label: String,
    pub is_static: bool,
    pub points: BTreeSet<PointId>,
    /// `T_wo` per frame index.
    pub poses: BTreeMap<usize, Pose>,
    /// World-frame twist that moved the cluster into each frame.
    pub twists: BTreeMap<usize, Twist>,
    pub joint: Option<JointSpec>,
    /// Consecutive frames without a successful track.
    pub untracked_frames: usize,
}

impl Cluster {
    pub fn new_static(id: ClusterId, class_label: impl Into<String>) -> Self {
        Self {
            id,
            class_label: class_label.into(),
            is_static: true,
            points: BTreeSet::new(),
            poses: BTreeMap::new(),
            twists: BTreeMap::new(),
            joint: None,
            untracked_frames: 0,
        }
    }

    /// Dynamic cluster whose first pose is anchored at `frame`.
    pub fn new_dynamic(
        id: ClusterId,
        class_label: impl Into<String>,
        frame: usize,
        initial_pose: Pose,
    ) -> Self {
        let mut c = Self::new_static(id, class_label);
        c.is_static = false;
        c.poses.insert(frame, initial_pose);
        c.twists.insert(frame, Twist::zero());
        c
    }

    pub fn latest_pose(&self) -> Option<(usize, Pose)> {
        self.poses.iter().next_back().map(|(k, p)| (*k, *p))
    }

    pub fn latest_twist(&self) -> Option<(usize, Twist)> {
        self.twists.iter().next_back().map(|(k, t)| (*k, *t))
    }

    pub fn set_state(&mut self, frame: usize, pose: Pose, twist: Twist) {
        self.poses.insert(frame, pose);
        self.twists.insert(frame, twist);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub id: PointId,
    /// World frame for static owners, object frame for dynamic owners.
    pub position: Vector3<f64>,
    pub owner_cluster: ClusterId,
    pub class_votes: BTreeMap<String, u32>,
}

impl MapPoint {
    pub fn new(id: PointId, position: Vector3<f64>, owner_cluster: ClusterId) -> Self {
        Self {
            id,
            position,
            owner_cluster,
            class_votes: BTreeMap::new(),
        }
    }

    /// Most voted label; ties go to the lexically smallest label.
    pub fn class_label(&self) -> Option<&str> {
        let mut best: Option<(&str, u32)> = None;
        for (label, &count) in &self.class_votes {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((label.as_str(), count));
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Adds one vote for `label` and returns the effective class.
pub fn fuse_semantic_vote(point: &mut MapPoint, label: &str) -> String {
    *point.class_votes.entry(label.to_string()).or_insert(0) += 1;
    point.class_label().unwrap_or(label).to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    /// `T_cw`.
    pub pose: Pose,
    pub observations: Vec<StereoObservation>,
    pub is_temporal: bool,
    pub is_spatial: bool,
}

impl KeyFrame {
    pub fn point_ids(&self) -> BTreeSet<PointId> {
        self.observations.iter().map(|o| o.point_id).collect()
    }
}

/// Which semantic labels are a priori dynamic. Anything else, including
/// `unknown`, is static.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub dynamic: BTreeSet<String>,
}

impl Default for ClassTable {
    fn default() -> Self {
        Self {
            dynamic: ["car", "bus", "bike", "pedestrian"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl ClassTable {
    pub fn is_dynamic(&self, label: &str) -> bool {
        self.dynamic.contains(label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframePolicy {
    /// Temporal window length in seconds.
    pub temporal_window: f64,
    /// Shared points needed for a spatial keyframe to stay.
    pub covisibility_min: usize,
    /// A candidate whose points are this fraction covered by one existing
    /// spatial keyframe is redundant.
    pub redundancy: f64,
    /// Untracked frames before a dynamic cluster is dropped.
    pub lost_after: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            temporal_window: 5.0,
            covisibility_min: 30,
            redundancy: 0.9,
            lost_after: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvictionKind {
    /// Left the temporal window and was kept as a spatial keyframe.
    Demoted,
    Deleted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub frame_index: usize,
    pub kind: EvictionKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub clusters: BTreeMap<ClusterId, Cluster>,
    pub points: BTreeMap<PointId, MapPoint>,
    pub keyframes: BTreeMap<usize, KeyFrame>,
    pub policy: KeyframePolicy,
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    version: u32,
    map: WorldMap,
}

impl WorldMap {
    pub fn new(policy: KeyframePolicy) -> Self {
        Self {
            policy,
            ..Default::default()
        }
    }

    pub fn static_clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values().filter(|c| c.is_static)
    }

    pub fn dynamic_clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values().filter(|c| !c.is_static)
    }

    pub fn insert_cluster(&mut self, cluster: Cluster) {
        self.clusters.insert(cluster.id, cluster);
    }

    /// Adds a point to an existing cluster.
    pub fn insert_point(&mut self, point: MapPoint) -> Result<()> {
        let cluster = self
            .clusters
            .get_mut(&point.owner_cluster)
            .ok_or_else(|| Error::ConfigInvalid(format!("no cluster {}", point.owner_cluster)))?;
        cluster.points.insert(point.id);
        self.points.insert(point.id, point);
        Ok(())
    }

    pub fn point_is_static(&self, id: PointId) -> bool {
        self.points
            .get(&id)
            .and_then(|p| self.clusters.get(&p.owner_cluster))
            .is_some_and(|c| c.is_static)
    }

    /// World position of a point at `frame`, if its owner has a pose there.
    pub fn world_position(&self, id: PointId, frame: usize) -> Option<Vector3<f64>> {
        let p = self.points.get(&id)?;
        let c = self.clusters.get(&p.owner_cluster)?;
        if c.is_static {
            Some(p.position)
        } else {
            c.poses.get(&frame).map(|t| t.transform_point(&p.position))
        }
    }

    /// Inserts a frame as a temporal keyframe. Observations of unknown points
    /// are discarded so that every stored observation resolves.
    pub fn promote_temporal_keyframe(
        &mut self,
        frame_index: usize,
        timestamp: f64,
        pose: Pose,
        observations: &[StereoObservation],
    ) -> &KeyFrame {
        let observations = observations
            .iter()
            .filter(|o| self.points.contains_key(&o.point_id))
            .copied()
            .collect();
        self.keyframes.insert(
            frame_index,
            KeyFrame {
                frame_index,
                timestamp,
                pose,
                observations,
                is_temporal: true,
                is_spatial: false,
            },
        );
        &self.keyframes[&frame_index]
    }

    pub fn temporal_keyframes(&self) -> impl Iterator<Item = &KeyFrame> {
        self.keyframes.values().filter(|k| k.is_temporal)
    }

    pub fn spatial_keyframes(&self) -> impl Iterator<Item = &KeyFrame> {
        self.keyframes.values().filter(|k| k.is_spatial)
    }

    /// Removes the temporal flag from keyframes older than the window and
    /// decides whether each one survives as a spatial keyframe. Existing
    /// spatial keyframes that no longer share enough points with the
    /// temporal set are deleted as well.
    pub fn cull_keyframes(&mut self, now: f64) -> Vec<Eviction> {
        let window = self.policy.temporal_window;
        let min_shared = self.policy.covisibility_min;
        let aged: Vec<usize> = self
            .keyframes
            .values()
            .filter(|k| k.is_temporal && now - k.timestamp >= window - 1e-9)
            .map(|k| k.frame_index)
            .collect();
        let temporal_sets: Vec<BTreeSet<PointId>> = self
            .keyframes
            .values()
            .filter(|k| k.is_temporal && !aged.contains(&k.frame_index))
            .map(|k| k.point_ids())
            .collect();
        let shares = |ids: &BTreeSet<PointId>, others: &[BTreeSet<PointId>]| {
            others
                .iter()
                .any(|o| o.intersection(ids).count() >= min_shared)
        };

        let mut evictions = Vec::new();
        let stale_spatial: Vec<usize> = self
            .keyframes
            .values()
            .filter(|k| k.is_spatial && !shares(&k.point_ids(), &temporal_sets))
            .map(|k| k.frame_index)
            .collect();
        for f in stale_spatial {
            self.keyframes.remove(&f);
            evictions.push(Eviction {
                frame_index: f,
                kind: EvictionKind::Deleted,
            });
        }

        for f in aged {
            let ids = self.keyframes[&f].point_ids();
            let anchor = shares(&ids, &temporal_sets);
            let redundant = !ids.is_empty()
                && self.keyframes.values().filter(|k| k.is_spatial).any(|k| {
                    let covered = k.point_ids().intersection(&ids).count();
                    covered as f64 >= self.policy.redundancy * ids.len() as f64
                });
            if anchor && !redundant {
                let kf = self.keyframes.get_mut(&f).expect("aged keyframe exists");
                kf.is_temporal = false;
                kf.is_spatial = true;
                evictions.push(Eviction {
                    frame_index: f,
                    kind: EvictionKind::Demoted,
                });
            } else {
                self.keyframes.remove(&f);
                evictions.push(Eviction {
                    frame_index: f,
                    kind: EvictionKind::Deleted,
                });
            }
        }
        evictions.sort_by_key(|e| e.frame_index);
        evictions
    }

    /// Removes a cluster, its points and every observation of them.
    pub fn drop_cluster(&mut self, id: ClusterId) -> Option<Cluster> {
        let cluster = self.clusters.remove(&id)?;
        for pid in &cluster.points {
            self.points.remove(pid);
        }
        for kf in self.keyframes.values_mut() {
            kf.observations.retain(|o| !cluster.points.contains(&o.point_id));
        }
        Some(cluster)
    }

    /// Referential integrity and static/dynamic bookkeeping.
    pub fn check_integrity(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        for kf in self.keyframes.values() {
            for o in &kf.observations {
                if !self.points.contains_key(&o.point_id) {
                    return bad(format!(
                        "keyframe {} observes missing point {}",
                        kf.frame_index, o.point_id
                    ));
                }
            }
        }
        for p in self.points.values() {
            if !self.clusters.contains_key(&p.owner_cluster) || !p.position.iter().all(|v| v.is_finite()) {
                return bad(format!("point {} is invalid", p.id));
            }
        }
        for c in self.clusters.values() {
            if c.is_static && (!c.poses.is_empty() || !c.twists.is_empty()) {
                return bad(format!("static cluster {} has a pose history", c.id));
            }
            if !c.poses.keys().eq(c.twists.keys()) {
                return bad(format!("cluster {} pose/twist frames differ", c.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MapFile {
            version: MAP_FORMAT_VERSION,
            map: self.clone(),
        })
        .expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.version != MAP_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported map version {}",
                file.version
            )));
        }
        Ok(file.map)
    }
}
