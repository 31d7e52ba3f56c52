//! Rotation algebra, 4-d.o.f. gravity-aligned transforms, pinhole projection
//! and the analytic Jacobians of the local and mapped feature models.
//!
//! Orientation convention: a pose stores `q` = rotation from the reference
//! frame into the body frame (`R_IG` for the device, `R_IM` for map poses) and
//! the body position expressed in the reference frame. Rotation errors are
//! left perturbations, `R = Exp(δθ) R̂`, so `δθ` lives in the body frame.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat23 = Matrix2x3<f64>;

/// Minimum depth (m) accepted by the projection.
pub const MIN_DEPTH: f64 = 1e-4;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeomError {
    #[error("point behind camera (depth {depth})")]
    BehindCamera { depth: f64 },
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn exp_so3(phi: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

pub fn log_so3(q: &UnitQuaternion<f64>) -> Vec3 {
    q.scaled_axis()
}

/// Inverse of the SO(3) left Jacobian.
pub fn left_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Mat3::identity() - 0.5 * k + k * k / 12.0;
    }
    let half = 0.5 * theta;
    let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
    Mat3::identity() - 0.5 * k + coef * k * k
}

/// Applies a left-perturbation rotation update `q ← Exp(δθ) q`.
pub fn perturb(q: &UnitQuaternion<f64>, dtheta: &Vec3) -> UnitQuaternion<f64> {
    let mut out = exp_so3(dtheta) * q;
    out.renormalize();
    out
}

/// Rotation about the gravity (z) axis.
pub fn yaw_rotation(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// A rigid pose: `q` rotates reference-frame vectors into the body frame,
/// `p` is the body origin in the reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub q: UnitQuaternion<f64>,
    pub p: Vec3,
}

impl Pose {
    pub fn new(q: UnitQuaternion<f64>, p: Vec3) -> Self {
        Self { q, p }
    }

    pub fn identity() -> Self {
        Self { q: UnitQuaternion::identity(), p: Vec3::zeros() }
    }

    /// Rotation matrix reference → body.
    pub fn rot(&self) -> Mat3 {
        *self.q.to_rotation_matrix().matrix()
    }

    /// Reference-frame point expressed in the body frame.
    pub fn to_body(&self, x: &Vec3) -> Vec3 {
        self.q * (x - self.p)
    }

    /// Body-frame point expressed in the reference frame.
    pub fn to_reference(&self, x: &Vec3) -> Vec3 {
        self.q.inverse() * x + self.p
    }

    /// Unit optical axis (body z) in the reference frame.
    pub fn optical_axis(&self) -> Vec3 {
        self.q.inverse() * Vec3::z()
    }
}

/// Gravity-aligned 4-d.o.f. transform from a map frame `{M}` into the device's
/// global frame `{G}`: `x_G = R_z(yaw) x_M + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapTransform4DoF {
    pub yaw: f64,
    pub translation: Vec3,
}

impl MapTransform4DoF {
    pub fn identity() -> Self {
        Self { yaw: 0.0, translation: Vec3::zeros() }
    }

    pub fn rotation(&self) -> Mat3 {
        yaw_rotation(self.yaw)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation() * x + self.translation
    }

    pub fn apply_inverse(&self, x: &Vec3) -> Vec3 {
        self.rotation().transpose() * (x - self.translation)
    }

    /// Additive error-state update `(δyaw, δt)`.
    pub fn perturbed(&self, dyaw: f64, dt: &Vec3) -> Self {
        Self { yaw: wrap_angle(self.yaw + dyaw), translation: self.translation + dt }
    }

    /// Least-squares yaw + translation aligning `src` points (map frame) onto
    /// `dst` points (global frame). Needs at least two pairs.
    pub fn align(src: &[Vec3], dst: &[Vec3]) -> Option<Self> {
        if src.len() < 2 || src.len() != dst.len() {
            return None;
        }
        let n = src.len() as f64;
        let cs = src.iter().sum::<Vec3>() / n;
        let cd = dst.iter().sum::<Vec3>() / n;
        let (mut sin_acc, mut cos_acc) = (0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let a = s - cs;
            let b = d - cd;
            cos_acc += a.x * b.x + a.y * b.y;
            sin_acc += a.x * b.y - a.y * b.x;
        }
        if sin_acc.hypot(cos_acc) < 1e-12 {
            return None;
        }
        let yaw = sin_acc.atan2(cos_acc);
        let translation = cd - yaw_rotation(yaw) * cs;
        Some(Self { yaw, translation })
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = (a + std::f64::consts::PI) % two_pi;
    if x < 0.0 {
        x += two_pi;
    }
    x - std::f64::consts::PI
}

/// Undistorted pinhole camera, co-located with the IMU (camera frame = IMU
/// frame; z forward, x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Pixel noise standard deviation.
    pub sigma_px: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { fx: 300.0, fy: 300.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0, sigma_px: 1.0 }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if !(self.sigma_px > 0.0) {
            return Err("pixel sigma must be positive".into());
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err("image size must be positive".into());
        }
        Ok(())
    }

    pub fn project(&self, p: &Vec3) -> Result<Vector2<f64>, GeomError> {
        if p.z <= MIN_DEPTH {
            return Err(GeomError::BehindCamera { depth: p.z });
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// `∂π/∂p` at a camera-frame point.
    pub fn projection_jacobian(&self, p: &Vec3) -> Result<Mat23, GeomError> {
        if p.z <= MIN_DEPTH {
            return Err(GeomError::BehindCamera { depth: p.z });
        }
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Ok(Mat23::new(self.fx * iz, 0.0, -self.fx * p.x * iz2, 0.0, self.fy * iz, -self.fy * p.y * iz2))
    }

    pub fn in_image(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.x < self.width && uv.y >= 0.0 && uv.y < self.height
    }

    /// Back-projects a pixel onto the unit-depth plane.
    pub fn normalized(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy)
    }
}

/// Mapped feature position in the current IMU frame:
/// `R_IG (p_M − p_I + R_GM [p_λ + R_λMᵀ f])`.
pub fn mapped_feature_predict(device: &Pose, transform: &MapTransform4DoF, anchor: &Pose, f_anchor: &Vec3) -> Vec3 {
    let m = anchor.to_reference(f_anchor);
    device.to_body(&transform.apply(&m))
}

/// Jacobian blocks of one mapped-feature observation. Device blocks are
/// w.r.t. the current pose error `(δθ, δp)` and the transform error
/// `(δyaw, δt)`; map blocks w.r.t. the anchor pose error and the
/// anchor-frame feature position.
#[derive(Debug, Clone, Copy)]
pub struct MappedFeatureJacobians {
    pub predicted: Vector2<f64>,
    pub d_theta: Mat23,
    pub d_position: Mat23,
    pub d_yaw: Vector2<f64>,
    pub d_translation: Mat23,
    pub d_anchor_theta: Mat23,
    pub d_anchor_position: Mat23,
    pub d_feature: Mat23,
}

pub fn mapped_feature_jacobians(
    cam: &CameraModel,
    device: &Pose,
    transform: &MapTransform4DoF,
    anchor: &Pose,
    f_anchor: &Vec3,
) -> Result<MappedFeatureJacobians, GeomError> {
    let r_ig = device.rot();
    let r_gm = transform.rotation();
    let r_ml = anchor.rot().transpose();
    let m = r_ml * f_anchor + anchor.p;
    let p_c = mapped_feature_predict(device, transform, anchor, f_anchor);
    let predicted = cam.project(&p_c)?;
    let pi = cam.projection_jacobian(&p_c)?;
    let chain = r_ig * r_gm;
    Ok(MappedFeatureJacobians {
        predicted,
        d_theta: pi * (-skew(&p_c)),
        d_position: pi * (-r_ig),
        d_yaw: pi * (r_ig * skew(&Vec3::z()) * r_gm * m),
        d_translation: pi * r_ig,
        d_anchor_theta: pi * (chain * r_ml * skew(f_anchor)),
        d_anchor_position: pi * chain,
        d_feature: pi * (chain * r_ml),
    })
}

/// Jacobian blocks of one local-feature observation from a window pose.
#[derive(Debug, Clone, Copy)]
pub struct LocalObservationJacobian {
    /// Index of the observing pose in the slice passed in.
    pub pose: usize,
    pub predicted: Vector2<f64>,
    pub d_theta: Mat23,
    pub d_position: Mat23,
    pub d_feature: Mat23,
}

/// Stacked per-observation Jacobians of a global-frame feature seen from
/// `poses[i]` for every `i` in `observed`. Observations behind the camera are
/// dropped (and reported by index in the second return value).
pub fn local_feature_jacobians(
    cam: &CameraModel,
    poses: &[Pose],
    observed: &[usize],
    p_f: &Vec3,
) -> (Vec<LocalObservationJacobian>, Vec<usize>) {
    let mut out = Vec::with_capacity(observed.len());
    let mut dropped = Vec::new();
    for &i in observed {
        let pose = &poses[i];
        let p_c = pose.to_body(p_f);
        let (Ok(predicted), Ok(pi)) = (cam.project(&p_c), cam.projection_jacobian(&p_c)) else {
            dropped.push(i);
            continue;
        };
        let r = pose.rot();
        out.push(LocalObservationJacobian {
            pose: i,
            predicted,
            d_theta: pi * (-skew(&p_c)),
            d_position: pi * (-r),
            d_feature: pi * r,
        });
    }
    (out, dropped)
}

/// Rotation matrix from a quaternion as a plain 3×3.
pub fn rot(q: &UnitQuaternion<f64>) -> Mat3 {
    *q.to_rotation_matrix().matrix()
}

/// Unit quaternion from a rotation matrix (re-orthonormalized).
pub fn quat_from_matrix(m: &Mat3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn projection_examples() {
        let cam = CameraModel { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, ..Default::default() };
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(0.0, 0.0));
        let cam = CameraModel { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, ..Default::default() };
        let uv = cam.project(&Vec3::new(0.1, 0.2, 2.0)).unwrap();
        assert!((uv - Vector2::new(55.0, 60.0)).norm() < 1e-12);
        assert!(matches!(cam.project(&Vec3::new(1.0, 1.0, -1.0)), Err(GeomError::BehindCamera { .. })));
    }

    #[test]
    fn mapped_chain_examples() {
        let id = Pose::identity();
        let p = mapped_feature_predict(&id, &MapTransform4DoF::identity(), &id, &Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(p, Vec3::new(1.0, 2.0, 3.0));
        let t = MapTransform4DoF { yaw: FRAC_PI_2, translation: Vec3::new(1.0, 0.0, 0.0) };
        let p = mapped_feature_predict(&id, &t, &id, &Vec3::new(1.0, 0.0, 0.0));
        assert!((p - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn yaw_transform_preserves_gravity() {
        let t = MapTransform4DoF { yaw: 1.234, translation: Vec3::new(3.0, -2.0, 0.5) };
        let g = Vec3::new(0.0, 0.0, -9.81);
        assert!((t.rotation() * g - g).norm() < 1e-15);
    }

    #[test]
    fn alignment_recovers_transform() {
        let t = MapTransform4DoF { yaw: -0.7, translation: Vec3::new(0.3, 1.0, -0.2) };
        let src = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 1.0), Vec3::new(-1.0, 0.5, 2.0)];
        let dst: Vec<Vec3> = src.iter().map(|s| t.apply(s)).collect();
        let est = MapTransform4DoF::align(&src, &dst).unwrap();
        assert!((est.yaw - t.yaw).abs() < 1e-12);
        assert!((est.translation - t.translation).norm() < 1e-12);
        assert!(MapTransform4DoF::align(&src[..1], &dst[..1]).is_none());
    }

    #[test]
    fn left_jacobian_inverse_small_and_large() {
        for phi in [Vec3::new(1e-10, 0.0, 0.0), Vec3::new(0.3, -0.2, 0.5)] {
            // J_l(φ) in closed form, then check J_l · J_l⁻¹ = I.
            let th = phi.norm();
            let k = skew(&phi);
            let jl = if th < 1e-8 {
                Mat3::identity() + 0.5 * k
            } else {
                Mat3::identity() + (1.0 - th.cos()) / (th * th) * k + (th - th.sin()) / (th * th * th) * k * k
            };
            assert!((jl * left_jacobian_inv(&phi) - Mat3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12
            || (wrap_angle(3.0 * std::f64::consts::PI) + std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(-7.0) - (-7.0 + 2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }
}
