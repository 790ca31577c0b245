use nalgebra::{DMatrix, Matrix3, Matrix3x6, Matrix6, SMatrix, Vector3, Vector4, Vector6};

use super::{ClusterJoint, TwistVar};
use crate::error::Result;
use crate::liegroup::{
    dexp_block, dlog, left_rotation_operator, log_se3, point_operator, right_mul_operator,
    se3_left_jacobian, skew, Pose,
};
use crate::scenegeom::PinholeCamera;

/// Static reprojection residual and Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct StatLin {
    pub r: Vector3<f64>,
    /// Left camera increment.
    pub j_cam: Matrix3x6<f64>,
    pub j_point: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynaLin {
    pub r: Vector3<f64>,
    pub j_cam: Matrix3x6<f64>,
    /// With respect to the freedom coordinates, 3 x d.
    pub j_twist: DMatrix<f64>,
    pub j_point: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstVelLin {
    pub r: Vector6<f64>,
    /// With respect to the freedom coordinates of the three twist variables.
    pub j: [DMatrix<f64>; 3],
}

fn left_increment(xc: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(xc)));
    m
}

/// `z - pi_s(T_cw x_w)` with `pi_s = (u, v, u_right)`.
pub fn residual_stat(
    cam: &PinholeCamera,
    t_cw: &Pose,
    x_w: &Vector3<f64>,
    z: &Vector3<f64>,
) -> Result<StatLin> {
    let xc = t_cw.transform_point(x_w);
    let dpi = cam.stereo_jacobian(&xc)?;
    let r = z - cam.project_stereo(&xc)?;
    Ok(StatLin {
        r,
        j_cam: -(dpi * left_increment(&xc)),
        j_point: -(dpi * t_cw.rotation),
    })
}

/// `z - pi_s(T_cw exp(B c) S x_o)`.
pub fn residual_dyna(
    cam: &PinholeCamera,
    t_cw: &Pose,
    var: &TwistVar,
    x_o: &Vector3<f64>,
    z: &Vector3<f64>,
) -> Result<DynaLin> {
    let xi = var.twist();
    let t_wo = var.pose();
    let y = t_wo.transform_point(x_o);
    let xc = t_cw.transform_point(&y);
    let dpi = cam.stereo_jacobian(&xc)?;
    let r = z - cam.project_stereo(&xc)?;
    let d_rot = dpi * t_cw.rotation;
    let j_twist = if var.dof() == 0 {
        DMatrix::zeros(3, 0)
    } else {
        let j6 = -(d_rot * left_increment(&y) * se3_left_jacobian(&xi));
        DMatrix::from_column_slice(3, 6, j6.as_slice()) * &var.basis
    };
    Ok(DynaLin {
        r,
        j_cam: -(dpi * left_increment(&xc)),
        j_twist,
        j_point: -(d_rot * t_wo.rotation),
    })
}

/// Jacobian of the dynamic residual with respect to a 6-vector twist `xi`
/// entering as `exp(P xi) S`, built from the vectorized chain
/// `dpi (x_o^T (x) I3)(I4 (x) R_cw)((E S)^T (x) I3) dexp J_l(P xi) P`.
pub fn dyna_twist_jacobian(
    cam: &PinholeCamera,
    t_cw: &Pose,
    snapshot: &Pose,
    p: &Matrix6<f64>,
    xi: &Vector6<f64>,
    x_o: &Vector3<f64>,
) -> Result<SMatrix<f64, 3, 6>> {
    let pxi = crate::liegroup::Twist::from_vector(&(p * xi));
    let t_wo = crate::liegroup::exp_se3(&pxi).compose(snapshot);
    let xc = t_cw.compose(&t_wo).transform_point(x_o);
    let dpi = cam.stereo_jacobian(&xc)?;
    let xh = Vector4::new(x_o.x, x_o.y, x_o.z, 1.0);
    Ok(-(dpi
        * point_operator(&xh)
        * left_rotation_operator(&t_cw.rotation)
        * right_mul_operator(&t_wo.to_homogeneous())
        * dexp_block()
        * se3_left_jacobian(&pxi)
        * p))
}

/// `d log(exp(e) M) / d e` through the vectorized chain.
fn dlog_left(m: &Pose) -> Result<Matrix6<f64>> {
    Ok(dlog(m)? * right_mul_operator(&m.to_homogeneous()) * dexp_block())
}

/// `d log(M exp(e)) / d e` through the vectorized chain.
fn dlog_right(m: &Pose) -> Result<Matrix6<f64>> {
    Ok(dlog(m)? * left_rotation_operator(&m.rotation) * dexp_block())
}

/// `C (log(T2 T1^-1) / g2 - log(T1 T0^-1) / g1)` with `C = W^1/2 Pi_l Ad_lw`
/// and `g` the frame gaps.
pub fn residual_constvel(
    vars: [&TwistVar; 3],
    frames: [usize; 3],
    cj: &ClusterJoint,
) -> Result<ConstVelLin> {
    let t: [Pose; 3] = [vars[0].pose(), vars[1].pose(), vars[2].pose()];
    let m1 = t[1].compose(&t[0].inverse());
    let m2 = t[2].compose(&t[1].inverse());
    let g1 = (frames[1] - frames[0]) as f64;
    let g2 = (frames[2] - frames[1]) as f64;
    let l1 = log_se3(&m1)?.to_vector();
    let l2 = log_se3(&m2)?.to_vector();
    let c = &cj.whitening;
    let r = c * (l2 / g2 - l1 / g1);

    let e = |v: &TwistVar| -> DMatrix<f64> {
        let jl = se3_left_jacobian(&v.twist());
        DMatrix::from_column_slice(6, 6, jl.as_slice()) * &v.basis
    };
    let dm = |m: Matrix6<f64>| DMatrix::from_column_slice(6, 6, m.as_slice());
    // T0 enters M1 on the right as exp(-e); T1 enters M1 on the left and M2
    // on the right; T2 enters M2 on the left.
    let j0 = dm(c * dlog_right(&m1)? / g1) * e(vars[0]);
    let j1 = dm(c * (-dlog_right(&m2)? / g2 - dlog_left(&m1)? / g1)) * e(vars[1]);
    let j2 = dm(c * dlog_left(&m2)? / g2) * e(vars[2]);
    Ok(ConstVelLin { r, j: [j0, j1, j2] })
}
