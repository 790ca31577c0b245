//! Mechanical joints as twist constraints.
//!
//! A joint restricts the relative motion of a child cluster with respect to
//! its static parent to a linear subspace of se(3), the freedom space,
//! spanned by the columns of a basis expressed in the joint frame. The
//! orthogonal projector onto that subspace is conjugated by the joint frame
//! adjoint to act on world-frame twists.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6xX, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{adjoint, Pose, Twist};
use crate::scenegeom::PlaneModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Free,
    Fixed,
    Planar,
    Revolute,
    Prismatic,
}

impl JointType {
    pub fn dof(self) -> usize {
        match self {
            JointType::Free => 6,
            JointType::Fixed => 0,
            JointType::Planar => 3,
            JointType::Revolute | JointType::Prismatic => 1,
        }
    }

    pub const ALL: [JointType; 5] = [
        JointType::Free,
        JointType::Fixed,
        JointType::Planar,
        JointType::Revolute,
        JointType::Prismatic,
    ];
}

impl fmt::Display for JointType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JointType::Free => "free",
            JointType::Fixed => "fixed",
            JointType::Planar => "planar",
            JointType::Revolute => "revolute",
            JointType::Prismatic => "prismatic",
        };
        f.write_str(s)
    }
}

impl FromStr for JointType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "free" => Ok(JointType::Free),
            "fixed" => Ok(JointType::Fixed),
            "planar" => Ok(JointType::Planar),
            "revolute" => Ok(JointType::Revolute),
            "prismatic" => Ok(JointType::Prismatic),
            other => Err(Error::ConfigInvalid(format!("unknown joint type `{other}`"))),
        }
    }
}

/// Canonical joint-frame basis of the freedom space; the joint axis is `z`.
pub fn freedom_basis(jtype: JointType) -> Matrix6xX<f64> {
    let cols: &[usize] = match jtype {
        JointType::Free => &[0, 1, 2, 3, 4, 5],
        JointType::Fixed => &[],
        JointType::Planar => &[0, 1, 5],
        JointType::Revolute => &[5],
        JointType::Prismatic => &[2],
    };
    let mut a = Matrix6xX::zeros(cols.len());
    for (j, &i) in cols.iter().enumerate() {
        a[(i, j)] = 1.0;
    }
    a
}

/// `A (A^T A)^-1 A^T`.
pub fn projector(basis: &Matrix6xX<f64>) -> Result<Matrix6<f64>> {
    if basis.ncols() == 0 {
        return Ok(Matrix6::zeros());
    }
    let ata: DMatrix<f64> = basis.transpose() * basis;
    let min_eig = ata
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig < 1e-12 {
        return Err(Error::RankDeficient);
    }
    let inv = ata.try_inverse().ok_or(Error::RankDeficient)?;
    let p = basis * inv * basis.transpose();
    Ok(Matrix6::from_fn(|r, c| p[(r, c)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub jtype: JointType,
    /// `T_wl`: joint frame expressed in the world.
    pub frame: Pose,
    pub basis: Matrix6xX<f64>,
    pub parent_class: String,
    pub child_class: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistProjector {
    pub pi_l: Matrix6<f64>,
    pub p_world: Matrix6<f64>,
}

impl JointSpec {
    pub fn new(
        jtype: JointType,
        frame: Pose,
        parent_class: impl Into<String>,
        child_class: impl Into<String>,
    ) -> Self {
        Self {
            jtype,
            frame,
            basis: freedom_basis(jtype),
            parent_class: parent_class.into(),
            child_class: child_class.into(),
        }
    }

    pub fn dof(&self) -> usize {
        self.basis.ncols()
    }

    /// Same frame and classes, different joint type.
    pub fn with_type(&self, jtype: JointType) -> Self {
        Self::new(
            jtype,
            self.frame,
            self.parent_class.clone(),
            self.child_class.clone(),
        )
    }

    /// `Ad_wl A`: world-frame twists spanned by the freedom coordinates.
    pub fn world_basis(&self) -> Matrix6xX<f64> {
        adjoint(&self.frame).0 * &self.basis
    }

    /// World twist for the given freedom coordinates.
    pub fn world_twist(&self, coords: &DVector<f64>) -> Twist {
        if coords.is_empty() {
            return Twist::zero();
        }
        let x: Vector6<f64> = self.world_basis() * coords;
        Twist::from_vector(&x)
    }

    /// Joint-frame representation of a world twist: `Ad_lw xi`.
    pub fn joint_twist(&self, world: &Twist) -> Twist {
        adjoint(&self.frame.inverse()).apply(world)
    }

    /// Least-squares freedom coordinates of a world twist.
    pub fn joint_coords(&self, world: &Twist) -> DVector<f64> {
        if self.dof() == 0 {
            return DVector::zeros(0);
        }
        let local = DVector::from_column_slice(self.joint_twist(world).to_vector().as_slice());
        let ata: DMatrix<f64> = self.basis.transpose() * &self.basis;
        let atb: DVector<f64> = self.basis.transpose() * local;
        ata.cholesky()
            .map(|c| c.solve(&atb))
            .unwrap_or_else(|| DVector::zeros(self.dof()))
    }

    /// Plane through the joint origin with the joint `z` axis as normal.
    pub fn plane(&self) -> PlaneModel {
        let n: Vector3<f64> = self.frame.rotation.column(2).into_owned();
        PlaneModel::from_normal_point(&n, &self.frame.translation)
            .expect("joint frame axes are unit vectors")
    }
}

/// Builds the joint-frame and world-frame projectors for a joint.
pub fn conjugated_projector(joint: &JointSpec) -> Result<TwistProjector> {
    let pi_l = projector(&joint.basis)?;
    let p_world = adjoint(&joint.frame).0 * pi_l * adjoint(&joint.frame.inverse()).0;
    Ok(TwistProjector { pi_l, p_world })
}

/// Joint frame whose origin is the projection of `anchor` onto the plane and
/// whose `z` axis is the plane's unit normal.
pub fn joint_from_plane(
    plane: &PlaneModel,
    jtype: JointType,
    anchor: &Vector3<f64>,
) -> Result<JointSpec> {
    let frame = plane_frame(plane, anchor)?;
    Ok(JointSpec::new(jtype, frame, "", ""))
}

pub(crate) fn plane_frame(plane: &PlaneModel, anchor: &Vector3<f64>) -> Result<Pose> {
    let raw = Vector3::new(plane.pi[0], plane.pi[1], plane.pi[2]);
    if raw.norm() < 1e-9 {
        return Err(Error::DegeneratePlane);
    }
    let z = raw / raw.norm();
    let origin = anchor - z * plane.signed_distance(anchor);
    let mut x = Vector3::x() - z * z.x;
    if x.norm() < 0.1 {
        x = Vector3::y() - z * z.y;
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]);
    Ok(Pose::new(r, origin))
}

/// True when the normal moved by more than `threshold_deg`.
pub fn normal_changed(old: &PlaneModel, new: &PlaneModel, threshold_deg: f64) -> bool {
    let c = old.unit_normal().dot(&new.unit_normal()).abs().min(1.0);
    c.acos().to_degrees() > threshold_deg
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointRule {
    pub parent: String,
    pub joint: JointType,
}

/// Maps a child semantic class to its static parent class and joint type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointTable {
    pub rules: BTreeMap<String, JointRule>,
}

impl Default for JointTable {
    fn default() -> Self {
        let mut rules = BTreeMap::new();
        for (child, parent, joint) in [
            ("car", "road", JointType::Planar),
            ("bus", "road", JointType::Planar),
            ("door", "wall", JointType::Revolute),
        ] {
            rules.insert(
                child.to_string(),
                JointRule {
                    parent: parent.to_string(),
                    joint,
                },
            );
        }
        Self { rules }
    }
}

impl JointTable {
    /// Parent class and joint type; unlisted classes get a free joint.
    pub fn lookup(&self, child_class: &str) -> (Option<&str>, JointType) {
        match self.rules.get(child_class) {
            Some(rule) => (Some(rule.parent.as_str()), rule.joint),
            None => (None, JointType::Free),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("joint table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{exp_se3, exp_so3};
    use nalgebra::Vector4;
    use proptest::prelude::*;

    fn random_frame(seed: [f64; 6]) -> Pose {
        exp_se3(&Twist::from_array(seed))
    }

    #[test]
    fn dof_table() {
        for jt in JointType::ALL {
            assert_eq!(freedom_basis(jt).ncols(), jt.dof());
        }
    }

    #[test]
    fn planar_basis_and_projector() {
        let a = freedom_basis(JointType::Planar);
        for (j, i) in [0, 1, 5].into_iter().enumerate() {
            assert_eq!(a.column(j).into_owned(), DVector::from_column_slice(Vector6::ith(i, 1.0).as_slice()));
        }
        let p = projector(&a).unwrap();
        assert_eq!(p, Matrix6::from_diagonal(&Vector6::new(1.0, 1.0, 0.0, 0.0, 0.0, 1.0)));
        let xi = Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        assert_eq!(p * xi, Vector6::new(1.0, 2.0, 0.0, 0.0, 0.0, 6.0));
    }

    #[test]
    fn free_and_revolute() {
        assert_eq!(freedom_basis(JointType::Free).ncols(), 6);
        assert_eq!(projector(&freedom_basis(JointType::Free)).unwrap(), Matrix6::identity());
        let p = projector(&freedom_basis(JointType::Revolute)).unwrap();
        let out = p * Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        assert_eq!(out, Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, 6.0));
    }

    #[test]
    fn rank_deficient_basis() {
        let mut a = Matrix6xX::zeros(2);
        a[(0, 0)] = 1.0;
        a[(0, 1)] = 2.0;
        assert!(matches!(projector(&a), Err(Error::RankDeficient)));
    }

    #[test]
    fn projector_properties_all_types() {
        for jt in JointType::ALL {
            let a = freedom_basis(jt);
            let p = projector(&a).unwrap();
            assert!((p * p - p).norm() <= 1e-10);
            assert!((p - p.transpose()).norm() <= 1e-10);
            assert!((p * &a - &a).norm() <= 1e-12);
        }
    }

    #[test]
    fn identity_frame_conjugation() {
        let j = JointSpec::new(JointType::Planar, Pose::identity(), "road", "car");
        let tp = conjugated_projector(&j).unwrap();
        assert_eq!(tp.p_world, tp.pi_l);
    }

    #[test]
    fn planar_rotation_parallel_to_normal() {
        let plane = PlaneModel::new(Vector4::new(0.2, -0.3, 1.0, 0.7)).unwrap();
        let j = joint_from_plane(&plane, JointType::Planar, &Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let p = conjugated_projector(&j).unwrap().p_world;
        let n = plane.unit_normal();
        let xi = Vector6::new(0.3, -1.0, 0.4, 0.8, -0.6, 0.2);
        let out = p * xi;
        let w = Vector3::new(out[3], out[4], out[5]);
        assert!(w.cross(&n).norm() <= 1e-9);
    }

    #[test]
    fn joint_from_plane_axis_aligned() {
        let plane = PlaneModel::new(Vector4::new(0.0, 0.0, 1.0, 0.0)).unwrap();
        let j = joint_from_plane(&plane, JointType::Planar, &Vector3::new(3.0, 4.0, 7.0)).unwrap();
        assert!((j.frame.translation - Vector3::new(3.0, 4.0, 0.0)).norm() < 1e-15);
        assert_eq!(j.frame.rotation.column(2).into_owned(), Vector3::z());
        let ident = JointSpec::new(JointType::Planar, Pose::identity(), "", "");
        let a = conjugated_projector(&j).unwrap().p_world;
        let b = conjugated_projector(&ident).unwrap().p_world;
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn degenerate_plane() {
        let plane = PlaneModel { pi: Vector4::new(0.0, 0.0, 0.0, 1.0) };
        assert!(matches!(
            joint_from_plane(&plane, JointType::Planar, &Vector3::zeros()),
            Err(Error::DegeneratePlane)
        ));
    }

    #[test]
    fn joint_table_roundtrip_and_defaults() {
        let t = JointTable::default();
        assert_eq!(t.lookup("car"), (Some("road"), JointType::Planar));
        assert_eq!(t.lookup("door"), (Some("wall"), JointType::Revolute));
        assert_eq!(t.lookup("bike"), (None, JointType::Free));
        let text = "[car]\nparent = \"road\"\njoint = \"planar\"\n\n[tram]\nparent = \"rail\"\njoint = \"prismatic\"\n";
        let parsed = JointTable::from_toml(text).unwrap();
        assert_eq!(parsed.lookup("tram"), (Some("rail"), JointType::Prismatic));
        assert_eq!(JointTable::from_toml(&parsed.to_toml()).unwrap(), parsed);
    }

    #[test]
    fn coords_roundtrip() {
        let j = JointSpec::new(JointType::Planar, random_frame([0.5, -1.0, 0.2, 0.3, 0.1, -0.4]), "", "");
        let c = DVector::from_vec(vec![0.5, -0.2, 0.05]);
        let w = j.world_twist(&c);
        assert!((j.joint_coords(&w) - c).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn conjugated_idempotent(seed in prop::array::uniform6(-2.0f64..2.0),
                                 xi in prop::array::uniform6(-1.0f64..1.0)) {
            for jt in JointType::ALL {
                let j = JointSpec::new(jt, random_frame(seed), "", "");
                let p = conjugated_projector(&j).unwrap().p_world;
                prop_assert!((p * p - p).norm() <= 1e-9);
                let x = Vector6::from(xi);
                prop_assert!((p * (p * x) - p * x).norm() <= 1e-9);
            }
        }

        #[test]
        fn planar_in_plane_rotation_invariance(seed in prop::array::uniform6(-2.0f64..2.0), angle in -3.0f64..3.0) {
            let frame = random_frame(seed);
            let spun = frame.compose(&Pose::from_rotation(exp_so3(&Vector3::new(0.0, 0.0, angle))));
            let a = conjugated_projector(&JointSpec::new(JointType::Planar, frame, "", "")).unwrap().p_world;
            let b = conjugated_projector(&JointSpec::new(JointType::Planar, spun, "", "")).unwrap().p_world;
            prop_assert!((a - b).norm() <= 1e-10);
        }

        #[test]
        fn planar_motion_containment(
            pi in prop::array::uniform4(-1.0f64..1.0),
            anchor in prop::array::uniform3(-5.0f64..5.0),
            xi in prop::array::uniform6(-0.4f64..0.4),
            uv in prop::array::uniform2(-5.0f64..5.0),
        ) {
            let Ok(plane) = PlaneModel::new(Vector4::from(pi)) else { return Ok(()); };
            prop_assume!(Vector3::new(pi[0], pi[1], pi[2]).norm() > 0.1);
            let j = joint_from_plane(&plane, JointType::Planar, &Vector3::from(anchor)).unwrap();
            let p = conjugated_projector(&j).unwrap().p_world;
            let x = j.frame.transform_point(&Vector3::new(uv[0], uv[1], 0.0));
            prop_assert!(plane.signed_distance(&x).abs() <= 1e-9);
            let m = exp_se3(&Twist::from_vector(&(p * Vector6::from(xi))));
            prop_assert!(plane.signed_distance(&m.transform_point(&x)).abs() <= 1e-8);
        }

        #[test]
        fn revolute_axis_fixed_points(seed in prop::array::uniform6(-2.0f64..2.0),
                                      xi in prop::array::uniform6(-0.4f64..0.4), s in -3.0f64..3.0) {
            let j = JointSpec::new(JointType::Revolute, random_frame(seed), "wall", "door");
            let p = conjugated_projector(&j).unwrap().p_world;
            let on_axis = j.frame.transform_point(&Vector3::new(0.0, 0.0, s));
            let m = exp_se3(&Twist::from_vector(&(p * Vector6::from(xi))));
            prop_assert!((m.transform_point(&on_axis) - on_axis).norm() <= 1e-8);
        }

        #[test]
        fn joint_origin_on_plane(pi in prop::array::uniform4(-1.0f64..1.0),
                                 anchor in prop::array::uniform3(-5.0f64..5.0)) {
            prop_assume!(Vector3::new(pi[0], pi[1], pi[2]).norm() > 0.05);
            let plane = PlaneModel::new(Vector4::from(pi)).unwrap();
            let j = joint_from_plane(&plane, JointType::Planar, &Vector3::from(anchor)).unwrap();
            let o = j.frame.translation;
            prop_assert!(plane.pi.dot(&Vector4::new(o.x, o.y, o.z, 1.0)).abs() <= 1e-9);
            prop_assert!(j.frame.is_valid(1e-12));
        }
    }
}
