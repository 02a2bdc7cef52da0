//! Gaussian primitives, pinhole cameras and the projection of 3D Gaussians
//! into screen-space splats.

use nalgebra::{
    Isometry3, Matrix2, Matrix2x3, Matrix3, Point3, Translation3, UnitQuaternion, Vector2,
    Vector3, Vector4,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance added to the diagonal of every projected covariance (px²).
pub const LOW_PASS_VARIANCE: f64 = 0.3;

/// Bounds on the activated scale, meters.
pub const MIN_SCALE: f64 = 1e-6;
pub const MAX_SCALE: f64 = 10.0;

/// Screen footprint used for the visibility test, in standard deviations.
pub const VISIBILITY_SIGMAS: f64 = 3.0;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], with the argument clamped away from {0, 1}.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian, stored in unconstrained raw form.
///
/// `rot` is a quaternion `(w, x, y, z)` that is normalized on use, `log_scale`
/// holds per-axis log standard deviations, `opacity_logit` is passed through a
/// sigmoid and `color` is linear RGB (clamped to `[0, 1]` when rendered).
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub rot: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    /// Isotropic Gaussian with the given standard deviation and opacity.
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mean,
            rot: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(scale.clamp(MIN_SCALE, MAX_SCALE).ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    #[inline]
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Rotation matrix of the normalized quaternion. A degenerate quaternion
    /// (which the optimizer never produces) maps to the identity.
    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotmat(&self.rot).unwrap_or_else(|_| Matrix3::identity())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        compose_covariance(&self.rot, &self.log_scale)
    }

    /// Color as rendered: clamped to the unit cube.
    #[inline]
    pub fn render_color(&self) -> Vector3<f64> {
        self.color.map(|c| c.clamp(0.0, 1.0))
    }

    /// Re-establishes the stored-parameter invariants after an update.
    pub fn normalize(&mut self) {
        let n = self.rot.norm();
        if n > 0.0 && n.is_finite() {
            self.rot /= n;
        } else {
            self.rot = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
        let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
        self.log_scale = self.log_scale.map(|s| s.clamp(lo, hi));
    }

    /// Rounds every parameter to single precision (the map-file resolution).
    pub fn round_to_f32(&mut self) {
        let r = |v: f64| v as f32 as f64;
        self.mean = self.mean.map(r);
        self.rot = self.rot.map(r);
        self.log_scale = self.log_scale.map(r);
        self.opacity_logit = r(self.opacity_logit);
        self.color = self.color.map(r);
    }
}

/// Rotation matrix of a quaternion `(w, x, y, z)`, normalized internally.
pub fn quat_to_rotmat(q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("zero-norm quaternion"));
    }
    Ok(unit_quat_to_rotmat(&(q / n)))
}

#[inline]
pub(crate) fn unit_quat_to_rotmat(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
pub(crate) fn rotmat_grad_to_quat(q_raw: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q_raw.norm();
    let q = q_raw / n;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let d_unit = Vector4::new(
        2.0 * (z * (g[(1, 0)] - g[(0, 1)]) + y * (g[(0, 2)] - g[(2, 0)]) + x * (g[(2, 1)] - g[(1, 2)])),
        2.0 * (y * (g[(1, 0)] + g[(0, 1)]) + z * (g[(2, 0)] + g[(0, 2)]) + w * (g[(2, 1)] - g[(1, 2)]))
            - 4.0 * x * (g[(1, 1)] + g[(2, 2)]),
        2.0 * (x * (g[(1, 0)] + g[(0, 1)]) + w * (g[(0, 2)] - g[(2, 0)]) + z * (g[(2, 1)] + g[(1, 2)]))
            - 4.0 * y * (g[(0, 0)] + g[(2, 2)]),
        2.0 * (w * (g[(1, 0)] - g[(0, 1)]) + x * (g[(2, 0)] + g[(0, 2)]) + y * (g[(2, 1)] + g[(1, 2)]))
            - 4.0 * z * (g[(0, 0)] + g[(1, 1)]),
    );
    // d q̂ / d q = (I − q̂ q̂ᵀ) / ‖q‖
    (d_unit - q * q.dot(&d_unit)) / n
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn compose_covariance(rot: &Vector4<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rotmat(rot).unwrap_or_else(|_| Matrix3::identity());
    let d = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    r * d * r.transpose()
}

/// Pinhole intrinsics plus image size and clipping range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("require 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        Ok(())
    }

    /// Pixel `(u, v)` at depth `z` to a camera-frame point. Pixel centers sit
    /// on integer coordinates.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid camera-to-world pose from a position and an orientation.
pub fn pose_from_parts(position: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::from(position), rotation)
}

/// Camera-to-world pose looking from `eye` towards `target`, with the camera
/// `y` axis pointing down (towards `-up`) and `z` forward.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Isometry3<f64> {
    let forward = (target - eye).normalize();
    let mut right = forward.cross(&up);
    if right.norm() < 1e-9 {
        right = forward.cross(&Vector3::x());
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let m = Matrix3::from_columns(&[right, down, forward]);
    let rot = UnitQuaternion::from_matrix(&m);
    pose_from_parts(eye, rot)
}

/// A posed pinhole camera. The stored transform maps world to camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub world_to_camera: Isometry3<f64>,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, world_to_camera: Isometry3<f64>) -> Result<Self> {
        intrinsics.validate()?;
        let r = world_to_camera.rotation.to_rotation_matrix().into_inner();
        if ((r.transpose() * r) - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        Ok(Self {
            intrinsics,
            world_to_camera,
        })
    }

    /// Camera from a camera-to-world pose.
    pub fn from_pose(intrinsics: Intrinsics, camera_to_world: &Isometry3<f64>) -> Result<Self> {
        Self::new(intrinsics, camera_to_world.inverse())
    }

    pub fn camera_to_world(&self) -> Isometry3<f64> {
        self.world_to_camera.inverse()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    #[inline]
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.world_to_camera * Point3::from(*p)).coords
    }
}

/// Jacobian of the pinhole map `(x, y, z) ↦ (fx·x/z + cx, fy·y/z + cy)`.
#[inline]
pub fn perspective_jacobian(p: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz2, 0.0, fy * iz, -fy * p.y * iz2)
}

/// Guard band, as a multiple of the half field of view, beyond which the
/// Jacobian stops growing.
pub const FRUSTUM_GUARD: f64 = 1.3;

/// Camera-space point at which the projection is linearized: `x/z` and
/// `y/z` clamped to the guard band, so off-screen Gaussians keep bounded
/// footprints. Also reports which coordinate was clamped.
pub fn jacobian_point(t: &Vector3<f64>, intr: &Intrinsics) -> (Vector3<f64>, [bool; 2]) {
    let lim_x = FRUSTUM_GUARD * 0.5 * intr.width as f64 / intr.fx;
    let lim_y = FRUSTUM_GUARD * 0.5 * intr.height as f64 / intr.fy;
    let (rx, ry) = (t.x / t.z, t.y / t.z);
    let cx = rx.clamp(-lim_x, lim_x);
    let cy = ry.clamp(-lim_y, lim_y);
    (Vector3::new(cx * t.z, cy * t.z, t.z), [cx != rx, cy != ry])
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
#[inline]
pub fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}

/// Both eigenvalues (ascending) of a symmetric 2×2 matrix.
pub fn eigenvalues_2x2(m: &Matrix2<f64>) -> (f64, f64) {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let r = (mid * mid - det).max(0.0).sqrt();
    (mid - r, mid + r)
}

/// Projected mean of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedMean {
    pub mean2d: Vector2<f64>,
    pub depth: f64,
    pub visible: bool,
}

/// A Gaussian projected to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub visible: bool,
}

fn in_dilated_bounds(mean2d: &Vector2<f64>, radius: f64, intr: &Intrinsics) -> bool {
    let (w, h) = (intr.width as f64, intr.height as f64);
    mean2d.x >= -radius && mean2d.x <= w - 1.0 + radius && mean2d.y >= -radius && mean2d.y <= h - 1.0 + radius
}

/// Projects the mean and decides visibility (depth range plus image bounds
/// dilated by the 3σ screen footprint).
pub fn project_mean(g: &Gaussian, cam: &Camera) -> ProjectedMean {
    project_gaussian(g, cam).into()
}

impl From<Splat2D> for ProjectedMean {
    fn from(s: Splat2D) -> Self {
        ProjectedMean {
            mean2d: s.mean2d,
            depth: s.depth,
            visible: s.visible,
        }
    }
}

/// Screen-space covariance `J R_wc Σ R_wcᵀ Jᵀ + 0.3·I`, with `J` taken at
/// the guard-band-clamped point.
pub fn project_covariance(g: &Gaussian, cam: &Camera) -> Matrix2<f64> {
    let t = cam.to_camera(&g.mean);
    let w = cam.rotation();
    let (tj, _) = jacobian_point(&t, &cam.intrinsics);
    let j = perspective_jacobian(&tj, cam.intrinsics.fx, cam.intrinsics.fy);
    let m = j * w;
    m * g.covariance() * m.transpose() + Matrix2::identity() * LOW_PASS_VARIANCE
}

/// Full projection of one Gaussian.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Splat2D {
    let intr = &cam.intrinsics;
    let t = cam.to_camera(&g.mean);
    if t.z <= 0.0 {
        return Splat2D {
            mean2d: Vector2::new(f64::NAN, f64::NAN),
            cov2d: Matrix2::identity() * LOW_PASS_VARIANCE,
            depth: t.z,
            visible: false,
        };
    }
    let mean2d = intr.project(&t);
    let cov2d = project_covariance(g, cam);
    let radius = VISIBILITY_SIGMAS * max_eigenvalue_2x2(&cov2d).sqrt();
    let visible = t.z >= intr.near && t.z <= intr.far && in_dilated_bounds(&mean2d, radius, intr);
    Splat2D {
        mean2d,
        cov2d,
        depth: t.z,
        visible,
    }
}
