//! Pinhole stereo camera, triangulation and plane fitting.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::Pose;

/// Minimum camera-frame depth for a projectable point.
pub const MIN_DEPTH: f64 = 1e-6;
/// Minimum disparity accepted by [`triangulate_stereo`].
pub const MIN_DISPARITY: f64 = 0.5;

/// Rectified stereo pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for PinholeCamera {
    fn default() -> Self {
        Self {
            fx: 700.0,
            fy: 700.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.54,
            width: 640,
            height: 480,
        }
    }
}

impl PinholeCamera {
    pub fn validate(&self) -> Result<()> {
        if self.fx > 0.0 && self.fy > 0.0 && self.baseline > 0.0 {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(
                "camera focal lengths and baseline must be positive".into(),
            ))
        }
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
        if xc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { depth: xc.z });
        }
        Ok(Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        ))
    }

    /// `d pi / d X_c`.
    pub fn projection_jacobian(&self, xc: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        if xc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { depth: xc.z });
        }
        let iz = 1.0 / xc.z;
        let iz2 = iz * iz;
        Ok(Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * xc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * xc.y * iz2,
        ))
    }

    /// Left pixel plus right-image column: `(u, v, u - disparity)`.
    pub fn project_stereo(&self, xc: &Vector3<f64>) -> Result<Vector3<f64>> {
        let uv = self.project_camera_point(xc)?;
        Ok(Vector3::new(
            uv.x,
            uv.y,
            self.fx * (xc.x - self.baseline) / xc.z + self.cx,
        ))
    }

    /// `d (u, v, u_r) / d X_c`.
    pub fn stereo_jacobian(&self, xc: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let top = self.projection_jacobian(xc)?;
        let iz = 1.0 / xc.z;
        let mut j = Matrix3::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&top);
        j[(2, 0)] = self.fx * iz;
        j[(2, 2)] = -self.fx * (xc.x - self.baseline) * iz * iz;
        Ok(j)
    }

    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) * depth / self.fx,
            (pixel.y - self.cy) * depth / self.fy,
            depth,
        )
    }

    pub fn disparity(&self, depth: f64) -> f64 {
        self.fx * self.baseline / depth
    }

    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

/// Projects a world point through `T_cw`.
pub fn project(cam: &PinholeCamera, t_cw: &Pose, x_w: &Vector3<f64>) -> Result<Vector2<f64>> {
    cam.project_camera_point(&t_cw.transform_point(x_w))
}

/// A left-image keypoint with its stereo disparity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoObservation {
    pub u: f64,
    pub v: f64,
    pub disparity: f64,
    pub point_id: u64,
    pub cluster_id: u64,
    pub frame_index: usize,
}

impl StereoObservation {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    /// `(u, v, u - disparity)`, comparable with [`PinholeCamera::project_stereo`].
    pub fn stereo_pixel(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, self.u - self.disparity)
    }
}

/// Camera-frame point from a rectified stereo observation.
pub fn triangulate_stereo(cam: &PinholeCamera, obs: &StereoObservation) -> Result<Vector3<f64>> {
    if !(obs.disparity >= MIN_DISPARITY) {
        return Err(Error::DisparityTooSmall {
            disparity: obs.disparity,
        });
    }
    let z = cam.fx * cam.baseline / obs.disparity;
    Ok(Vector3::new(
        (obs.u - cam.cx) * z / cam.fx,
        (obs.v - cam.cy) * z / cam.fy,
        z,
    ))
}

/// Plane `pi^T [p; 1] = 0` with `|pi| = 1` over all four coefficients.
///
/// The sign is canonical: the normal has a non-negative world `z` component
/// (ties broken on `x`, then `y`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub pi: Vector4<f64>,
}

impl PlaneModel {
    pub fn new(pi: Vector4<f64>) -> Result<Self> {
        let n = Vector3::new(pi[0], pi[1], pi[2]);
        if n.norm() < 1e-9 || !pi.iter().all(|x| x.is_finite()) {
            return Err(Error::DegeneratePlane);
        }
        let mut pi = pi / pi.norm();
        let key = [pi[2], pi[0], pi[1]]
            .into_iter()
            .find(|c| c.abs() > 1e-12)
            .unwrap_or(1.0);
        if key < 0.0 {
            pi = -pi;
        }
        Ok(Self { pi })
    }

    pub fn from_normal_point(normal: &Vector3<f64>, point: &Vector3<f64>) -> Result<Self> {
        Self::new(Vector4::new(
            normal.x,
            normal.y,
            normal.z,
            -normal.dot(point),
        ))
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.pi[0], self.pi[1], self.pi[2])
    }

    pub fn unit_normal(&self) -> Vector3<f64> {
        self.normal().normalize()
    }

    /// Signed Euclidean distance of a point to the plane.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let n = self.normal();
        (n.dot(p) + self.pi[3]) / n.norm()
    }

    /// Algebraic residual `pi^T [p; 1]`.
    pub fn algebraic_residual(&self, p: &Vector3<f64>) -> f64 {
        self.pi.dot(&Vector4::new(p.x, p.y, p.z, 1.0))
    }
}

/// Homogeneous least-squares plane: the right singular vector of `[p^T 1]`
/// rows with the smallest singular value.
pub fn fit_plane_svd(points: &[Vector3<f64>]) -> Result<PlaneModel> {
    if points.len() < 3 {
        return Err(Error::Degenerate);
    }
    if collinear(points) {
        return Err(Error::Degenerate);
    }
    let a = DMatrix::from_fn(points.len().max(4), 4, |r, c| {
        if r >= points.len() {
            0.0
        } else if c < 3 {
            points[r][c]
        } else {
            1.0
        }
    });
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Degenerate)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let row = v_t.row(imin);
    PlaneModel::new(Vector4::new(row[0], row[1], row[2], row[3])).map_err(|_| Error::Degenerate)
}

/// Weighted orthogonal-distance plane through the weighted centroid.
pub fn fit_plane_weighted(points: &[Vector3<f64>], weights: &[f64]) -> Result<PlaneModel> {
    if points.len() < 3 || points.len() != weights.len() || collinear(points) {
        return Err(Error::Degenerate);
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Degenerate);
    }
    let mean = points.iter().zip(weights).fold(Vector3::zeros(), |a, (p, w)| a + p * *w) / wsum;
    let scatter = points.iter().zip(weights).fold(nalgebra::Matrix3::zeros(), |a, (p, w)| {
        let d = p - mean;
        a + d * d.transpose() * *w
    });
    let eig = scatter.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    PlaneModel::from_normal_point(&eig.eigenvectors.column(imin).into_owned(), &mean)
}

fn collinear(points: &[Vector3<f64>]) -> bool {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(nalgebra::Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n;
    let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().cloned().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig[1].max(0.0).sqrt() < 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub max_iters: usize,
    /// Inlier distance threshold in meters.
    pub inlier_tol: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iters: 200,
            inlier_tol: 0.05,
            seed: 0,
        }
    }
}

/// RANSAC over 3-point hypotheses, refit with [`fit_plane_svd`] on the
/// largest consensus set. Returns the refit plane and its inlier mask.
pub fn fit_plane_ransac(
    points: &[Vector3<f64>],
    params: &RansacParams,
) -> Result<(PlaneModel, Vec<bool>)> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints {
            got: points.len(),
            need: 3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = points.len();
    let mut best: Vec<bool> = Vec::new();
    let mut best_count = 0usize;
    for _ in 0..params.max_iters {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
        if normal.norm() < 1e-12 {
            continue;
        }
        let Ok(hyp) = PlaneModel::from_normal_point(&normal, &points[i]) else {
            continue;
        };
        let mask: Vec<bool> = points
            .iter()
            .map(|p| hyp.signed_distance(p).abs() <= params.inlier_tol)
            .collect();
        let count = mask.iter().filter(|&&m| m).count();
        if count > best_count {
            best_count = count;
            best = mask;
        }
    }
    if best_count < 3 {
        return Err(Error::NoConsensus { best: best_count });
    }
    let consensus: Vec<Vector3<f64>> = points
        .iter()
        .zip(&best)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    let plane = fit_plane_svd(&consensus)?;
    let mask = points
        .iter()
        .map(|p| plane.signed_distance(p).abs() <= params.inlier_tol)
        .collect();
    Ok((plane, mask))
}
