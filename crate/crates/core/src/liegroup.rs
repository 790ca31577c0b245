//! SE(3) / se(3) machinery.
//!
//! Twists are ordered `(v, omega)`: translational velocity first, rotational
//! velocity second. All twists are per-frame quantities (the integration step
//! is one frame). Poses map points from their source frame into their target
//! frame, so `T_wo * p_o = p_w`.
//!
//! The 12-vector form of a pose used by the Jacobian blocks is the
//! column-major stacking of the top 3x4 block `[R | t]`.

use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

use crate::error::{Error, Result};

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix12x6 = SMatrix<f64, 12, 6>;
pub type Matrix6x12 = SMatrix<f64, 6, 12>;
pub type Vector12 = SMatrix<f64, 12, 1>;

/// Below this rotation angle the closed forms switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-2;
/// `trace(R) + 1` below this is treated as a rotation by pi.
const PI_TRACE_TOL: f64 = 1e-6;

/// A rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Builds a pose from a rotation vector (axis times angle) and a translation.
    pub fn from_rotation_vector(rotvec: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self::new(exp_so3(&rotvec), t)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Column-major stacking of `[R | t]`.
    pub fn vec12(&self) -> Vector12 {
        let mut v = Vector12::zeros();
        for c in 0..3 {
            for r in 0..3 {
                v[3 * c + r] = self.rotation[(r, c)];
            }
        }
        for r in 0..3 {
            v[9 + r] = self.translation[r];
        }
        v
    }

    /// Frobenius-norm orthonormality defect and determinant error.
    pub fn rotation_defect(&self) -> (f64, f64) {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        (ortho, (self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let (o, d) = self.rotation_defect();
        o <= tol && d <= tol && self.translation.iter().all(|x| x.is_finite())
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// A twist `(v, omega)` with a one-frame integration step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { v, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self::new(
            Vector3::new(x[0], x[1], x[2]),
            Vector3::new(x[3], x[4], x[5]),
        )
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::from_vector(&Vector6::from(a))
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.v[0],
            self.v[1],
            self.v[2],
            self.omega[0],
            self.omega[1],
            self.omega[2],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.omega.iter()).all(|x| x.is_finite())
    }
}

/// 6x6 adjoint of a pose acting on `(v, omega)` twists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointMatrix(pub Matrix6<f64>);

impl AdjointMatrix {
    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn apply(&self, xi: &Twist) -> Twist {
        Twist::from_vector(&(self.0 * xi.to_vector()))
    }
}

/// Skew-symmetric matrix with `skew(a) * b = a x b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

pub fn twist_hat(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&xi.omega));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.v);
    m
}

/// `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    } else {
        let s = theta.sin();
        let h = (0.5 * theta).sin();
        (s / theta, 2.0 * h * h / t2, (theta - s) / (t2 * theta))
    }
}

pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = skew(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let w = skew(omega);
    Matrix3::identity() + w * b + w * w * c
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    let t2 = theta * theta;
    // (1 - (t/2) cot(t/2)) / t^2
    let k = if theta < 0.1 {
        let t4 = t2 * t2;
        1.0 / 12.0 + t2 / 720.0 + t4 / 30240.0 + t4 * t2 / 1209600.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / t2
    };
    Matrix3::identity() - w * 0.5 + w * w * k
}

pub fn exp_se3(xi: &Twist) -> Pose {
    let r = exp_so3(&xi.omega);
    let t = so3_left_jacobian(&xi.omega) * xi.v;
    Pose::new(r, t)
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let s = vee(r).norm();
    s.atan2(c)
}

pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    if r.trace() <= -1.0 + PI_TRACE_TOL {
        return Err(Error::AngleAtPi);
    }
    let axis = vee(r);
    let s = axis.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if theta < 1e-6 {
        Ok(axis * (1.0 + theta * theta / 6.0))
    } else {
        Ok(axis * (theta / s))
    }
}

/// Principal logarithm of a pose.
pub fn log_se3(t: &Pose) -> Result<Twist> {
    let omega = log_so3(&t.rotation)?;
    let v = so3_left_jacobian_inv(&omega) * t.translation;
    Ok(Twist::new(v, omega))
}

/// `Ad_T = [[R, [t]x R], [0, R]]`.
pub fn adjoint(t: &Pose) -> AdjointMatrix {
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(skew(&t.translation) * t.rotation));
    AdjointMatrix(m)
}

/// Left Jacobian of SE(3): `exp(xi + d) ~= exp(J(xi) d) exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.omega);
    let q = se3_q_block(xi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let ji = so3_left_jacobian_inv(&xi.omega);
    let q = se3_q_block(xi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    m
}

/// Translation/rotation coupling block of the SE(3) left Jacobian.
fn se3_q_block(xi: &Twist) -> Matrix3<f64> {
    let theta = xi.omega.norm();
    let rho = skew(&xi.v);
    let phi = skew(&xi.omega);
    let (c1, c2, c3) = if theta < 0.1 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t6 / 3628800.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0 - t6 / 9979200.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t3),
        )
    };
    let pr = phi * rho;
    let rp = rho * phi;
    let prp = pr * phi;
    rho * 0.5 + (pr + rp + prp) * c1 + (phi * pr + rp * phi - prp * 3.0) * c2
        + (prp * phi + phi * prp) * c3
}

/// Derivative of `vec(exp(xi))` at `xi = 0`:
/// `[[0, -[e1]x], [0, -[e2]x], [0, -[e3]x], [I, 0]]`.
pub fn dexp_block() -> Matrix12x6 {
    let mut m = Matrix12x6::zeros();
    for k in 0..3 {
        let e = Vector3::ith(k, 1.0);
        m.fixed_view_mut::<3, 3>(3 * k, 3).copy_from(&(-skew(&e)));
    }
    m.fixed_view_mut::<3, 3>(9, 0)
        .copy_from(&Matrix3::identity());
    m
}

/// `(M^T (x) I3)`: maps `vec(G)` to `vec(G M)` for a 3x4 `G` and 4x4 `M`.
pub fn right_mul_operator(m: &Matrix4<f64>) -> Matrix12 {
    m.transpose().kronecker(&Matrix3::identity())
}

/// `(I4 (x) R)`: maps `vec(G)` to `vec(R G)` for a 3x4 `G`.
pub fn left_rotation_operator(r: &Matrix3<f64>) -> Matrix12 {
    Matrix4::identity().kronecker(r)
}

/// `(x^T (x) I3)`: maps `vec(G)` to `G x` for a 3x4 `G` and homogeneous `x`.
pub fn point_operator(x: &Vector4<f64>) -> SMatrix<f64, 3, 12> {
    x.transpose().kronecker(&Matrix3::identity())
}

/// Derivative of `log(T)` with respect to `vec(T)`.
///
/// Exact on the tangent space of SE(3) at `T`: for `d = (T^T (x) I3) dexp e`
/// (a left perturbation `exp(e) T`), `dlog(T) d = J_l^-1(log T) e`.
/// Components of `d` normal to the tangent space are discarded.
pub fn dlog(t: &Pose) -> Result<Matrix6x12> {
    let xi = log_se3(t)?;
    let k = right_mul_operator(&t.to_homogeneous()) * dexp_block();
    let ktk = k.transpose() * k;
    let ktk_inv = ktk.try_inverse().ok_or(Error::RankDeficient)?;
    Ok(se3_left_jacobian_inv(&xi) * ktk_inv * k.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn twist_strategy(max_w: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(-1.0f64..1.0),
            0.0f64..max_w,
        )
            .prop_filter_map("nonzero axis", |(v, w, ang)| {
                let w = Vector3::from(w);
                let n = w.norm();
                (n > 1e-3).then(|| Twist::new(Vector3::from(v), w / n * ang))
            })
    }

    fn series_exp(m: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
        let mut acc = Matrix4::identity();
        let mut term = Matrix4::identity();
        for k in 1..terms {
            term = term * m / k as f64;
            acc += term;
        }
        acc
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let s = skew(&Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(
            s,
            Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0)
        );
        assert_eq!(s, -s.transpose());
    }

    #[test]
    fn twist_hat_structure() {
        assert_eq!(twist_hat(&Twist::zero()), Matrix4::zeros());
        let h = twist_hat(&Twist::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let mut expected = Matrix4::zeros();
        expected[(0, 3)] = 1.0;
        assert_eq!(h, expected);
    }

    #[test]
    fn exp_examples() {
        let id = exp_se3(&Twist::zero());
        assert_eq!(id, Pose::identity());
        let p = exp_se3(&Twist::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(p.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(p.rotation, Matrix3::identity());

        let xi = Twist::from_array([0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]);
        let oracle = series_exp(&twist_hat(&xi), 20);
        let p = exp_se3(&xi);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation - expected).norm() < 1e-12);
        assert!((p.to_homogeneous() - oracle).norm() < 1e-12);
        assert!(p.translation.norm() < 1e-15);
    }

    #[test]
    fn log_examples() {
        let z = log_se3(&Pose::identity()).unwrap();
        assert_eq!(z.to_vector(), Vector6::zeros());
        let t = log_se3(&Pose::from_translation(Vector3::new(0.0, 2.0, 0.0))).unwrap();
        assert_eq!(t.v, Vector3::new(0.0, 2.0, 0.0));
        assert_eq!(t.omega, Vector3::zeros());
        let flip = Pose::from_rotation(Matrix3::new(
            1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0,
        ));
        assert!(matches!(log_se3(&flip), Err(Error::AngleAtPi)));
    }

    #[test]
    fn adjoint_examples() {
        assert_eq!(*adjoint(&Pose::identity()).matrix(), Matrix6::identity());
        let r = exp_so3(&Vector3::new(0.3, -0.2, 0.9));
        let ad = adjoint(&Pose::from_rotation(r));
        assert_eq!(ad.0.fixed_view::<3, 3>(0, 0), r);
        assert_eq!(ad.0.fixed_view::<3, 3>(3, 3), r);
        assert_eq!(ad.0.fixed_view::<3, 3>(0, 3), Matrix3::zeros());
        assert_eq!(ad.0.fixed_view::<3, 3>(3, 0), Matrix3::zeros());
        let ad = adjoint(&Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        assert_eq!(
            ad.0.fixed_view::<3, 3>(0, 3),
            skew(&Vector3::new(1.0, 0.0, 0.0))
        );
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = exp_se3(&Twist::from_array([0.4, -1.0, 2.0, 0.3, 0.1, -0.7]));
        let b = exp_se3(&Twist::from_array([-0.2, 0.5, 0.1, -1.1, 0.4, 0.2]));
        let c = a.compose(&b);
        assert!((c.to_homogeneous() - a.to_homogeneous() * b.to_homogeneous()).norm() < 1e-14);
        assert_eq!(Pose::identity().compose(&b), b);
        let ii = a.inverse().inverse();
        assert!((ii.to_homogeneous() - a.to_homogeneous()).norm() < 1e-15);
        assert!((a.compose(&a.inverse()).to_homogeneous() - Matrix4::identity()).norm() < 1e-12);
    }

    #[test]
    fn dexp_block_structure_and_finite_differences() {
        let d = dexp_block();
        assert_eq!(d.fixed_view::<3, 3>(9, 0), Matrix3::identity());
        assert_eq!(d.fixed_view::<9, 3>(0, 0), SMatrix::<f64, 9, 3>::zeros());
        let h = 1e-6;
        for k in 0..6 {
            let e = Vector6::ith(k, h);
            let plus = exp_se3(&Twist::from_vector(&e)).vec12();
            let minus = exp_se3(&Twist::from_vector(&-e)).vec12();
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - d.column(k)).norm() < 1e-6, "column {k}");
        }
    }

    #[test]
    fn dlog_at_identity_inverts_dexp() {
        let m = dlog(&Pose::identity()).unwrap() * dexp_block();
        assert!((m - Matrix6::identity()).norm() < 1e-6);
    }

    fn dlog_fd_error(t: &Pose) -> f64 {
        let d = dlog(t).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..6 {
            let e = Twist::from_vector(&Vector6::ith(k, h));
            let en = Twist::from_vector(&Vector6::ith(k, -h));
            let tp = exp_se3(&e).compose(t);
            let tm = exp_se3(&en).compose(t);
            let dl = (log_se3(&tp).unwrap().to_vector() - log_se3(&tm).unwrap().to_vector())
                / (2.0 * h);
            let pred = d * (tp.vec12() - tm.vec12()) / (2.0 * h);
            let err = (pred - dl).norm() / dl.norm().max(1e-12);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn dlog_matches_finite_differences() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let t = Pose::new(exp_so3(&(axis * 0.5)), Vector3::new(0.7, -1.2, 2.5));
        assert!(dlog_fd_error(&t) < 1e-4);
    }

    #[test]
    fn dlog_pure_translation_rows() {
        let t = Pose::from_translation(Vector3::new(1.0, -2.0, 0.5));
        let d = dlog(&t).unwrap();
        // translation entries of vec(T) are the last three
        let block = d.fixed_view::<3, 3>(0, 9);
        assert!((block - Matrix3::identity()).norm() < 1e-12, "{block}");
        assert!(dlog_fd_error(&t) < 1e-4);
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let xi = Twist::from_array([0.3, -0.8, 1.1, 0.9, -0.4, 1.7]);
        let j = se3_left_jacobian(&xi);
        let base_inv = exp_se3(&xi).inverse();
        let h = 1e-6;
        for k in 0..6 {
            let d = Vector6::ith(k, h);
            let p = exp_se3(&Twist::from_vector(&(xi.to_vector() + d))).compose(&base_inv);
            let m = exp_se3(&Twist::from_vector(&(xi.to_vector() - d))).compose(&base_inv);
            let fd = (log_se3(&p).unwrap().to_vector() - log_se3(&m).unwrap().to_vector())
                / (2.0 * h);
            assert!((fd - j.column(k)).norm() < 1e-7, "column {k}");
        }
        let inv = se3_left_jacobian_inv(&xi);
        assert!((inv * j - Matrix6::identity()).norm() < 1e-12);
    }

    #[test]
    fn q_block_continuous_across_series_switch() {
        let axis = Vector3::new(0.2, 0.5, -0.3).normalize();
        let v = Vector3::new(1.0, 2.0, -3.0);
        let below = se3_q_block(&Twist::new(v, axis * (0.1 - 1e-12)));
        let above = se3_q_block(&Twist::new(v, axis * (0.1 + 1e-12)));
        assert!((below - above).norm() < 1e-11);
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(xi in twist_strategy(3.0)) {
            let back = log_se3(&exp_se3(&xi)).unwrap();
            prop_assert!((back.to_vector() - xi.to_vector()).amax() <= 1e-9);
        }

        #[test]
        fn exp_produces_valid_pose(xi in twist_strategy(3.0)) {
            let p = exp_se3(&xi);
            prop_assert!(p.is_valid(1e-9));
        }

        #[test]
        fn log_exp_reproduces_pose(xi in twist_strategy(3.0)) {
            let p = exp_se3(&xi);
            let q = exp_se3(&log_se3(&p).unwrap());
            prop_assert!((p.to_homogeneous() - q.to_homogeneous()).norm() <= 1e-9);
        }

        #[test]
        fn adjoint_intertwines(a in twist_strategy(3.0), xi in twist_strategy(3.0)) {
            let t = exp_se3(&a);
            let lhs = exp_se3(&adjoint(&t).apply(&xi));
            let rhs = t.compose(&exp_se3(&xi)).compose(&t.inverse());
            prop_assert!((lhs.to_homogeneous() - rhs.to_homogeneous()).norm() <= 1e-9);
        }

        #[test]
        fn left_right_update_consistency(a in twist_strategy(3.0), xi in twist_strategy(3.0)) {
            let t = exp_se3(&a);
            let lhs = exp_se3(&xi).compose(&t);
            let body = adjoint(&t.inverse()).apply(&xi);
            let rhs = t.compose(&exp_se3(&body));
            prop_assert!((lhs.to_homogeneous() - rhs.to_homogeneous()).norm() <= 1e-9);
        }

        #[test]
        fn adjoint_is_homomorphism(a in twist_strategy(3.0), b in twist_strategy(3.0)) {
            let (ta, tb) = (exp_se3(&a), exp_se3(&b));
            let lhs = adjoint(&ta.compose(&tb)).0;
            let rhs = adjoint(&ta).0 * adjoint(&tb).0;
            prop_assert!((lhs - rhs).norm() <= 1e-9);
        }

        #[test]
        fn skew_is_cross_product(a in prop::array::uniform3(-10.0f64..10.0),
                                 b in prop::array::uniform3(-10.0f64..10.0)) {
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            let cross = Vector3::new(
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            );
            prop_assert!((skew(&a) * b - cross).norm() <= 1e-12);
        }

        #[test]
        fn twist_hat_bottom_row_zero(xi in twist_strategy(3.0)) {
            let h = twist_hat(&xi);
            prop_assert_eq!(h.row(3).into_owned(), nalgebra::RowVector4::zeros());
        }
    }
}
