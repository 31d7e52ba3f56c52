//! Local-feature machinery: inverse-depth triangulation and left-null-space
//! projection of the stacked feature Jacobian.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::state::{DeviceState, CLONE_DIM};
use super::FilterError;
use crate::geom::{local_feature_jacobians, CameraModel, Pose, Vec3};
use crate::mapper::triangulate_linear;

pub fn chi2_quantile(dof: usize, level: f64) -> f64 {
    ChiSquared::new(dof as f64).map(|c| c.inverse_cdf(level)).unwrap_or(f64::INFINITY)
}

/// Gauss-Newton on inverse depth `(α, β, ρ)` relative to the first pose,
/// seeded by linear triangulation. Rejects non-positive depth and fits whose
/// normalized cost exceeds the 95% χ² bound.
pub fn triangulate(cam: &CameraModel, poses: &[Pose], pixels: &[Vector2<f64>], sigma: f64) -> Result<Vec3, FilterError> {
    if poses.len() < 2 || poses.len() != pixels.len() {
        return Err(FilterError::TriangulationFailed("fewer than two observations"));
    }
    let rays: Vec<(usize, Vector2<f64>)> = pixels.iter().copied().enumerate().collect();
    let seed = triangulate_linear(cam, poses, &rays).ok_or(FilterError::TriangulationFailed("degenerate rays"))?;
    let anchor = &poses[0];
    let pa = anchor.to_body(&seed);
    if pa.z <= 0.0 {
        return Err(FilterError::TriangulationFailed("non-positive depth"));
    }
    let mut x = Vec3::new(pa.x / pa.z, pa.y / pa.z, 1.0 / pa.z);
    let ra_t = anchor.rot().transpose();
    let residuals = |x: &Vec3| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let m = poses.len();
        let mut r = DVector::zeros(2 * m);
        let mut j = DMatrix::zeros(2 * m, 3);
        let pa = Vec3::new(x.x / x.z, x.y / x.z, 1.0 / x.z);
        let pg = anchor.to_reference(&pa);
        let dpa = Matrix3::new(1.0 / x.z, 0.0, -x.x / (x.z * x.z), 0.0, 1.0 / x.z, -x.y / (x.z * x.z), 0.0, 0.0, -1.0 / (x.z * x.z));
        for (k, (pose, z)) in poses.iter().zip(pixels).enumerate() {
            let pc = pose.to_body(&pg);
            let uv = cam.project(&pc).ok()?;
            let pi = cam.projection_jacobian(&pc).ok()?;
            r.fixed_rows_mut::<2>(2 * k).copy_from(&((z - uv) / sigma));
            j.fixed_view_mut::<2, 3>(2 * k, 0).copy_from(&(pi * pose.rot() * ra_t * dpa / sigma));
        }
        Some((r, j))
    };
    for _ in 0..10 {
        let (r, j) = residuals(&x).ok_or(FilterError::TriangulationFailed("point behind a camera"))?;
        let jtj = j.transpose() * &j;
        let Some(step) = jtj.clone().cholesky().map(|c| c.solve(&(j.transpose() * &r))) else {
            return Err(FilterError::TriangulationFailed("singular normal equations"));
        };
        x += Vec3::new(step[0], step[1], step[2]);
        if x.z <= 0.0 {
            return Err(FilterError::TriangulationFailed("non-positive depth"));
        }
        if step.norm() < 1e-12 {
            break;
        }
    }
    let (r, _) = residuals(&x).ok_or(FilterError::TriangulationFailed("point behind a camera"))?;
    let dof = 2 * poses.len() - 3;
    if r.norm_squared() > chi2_quantile(dof.max(1), 0.95) {
        return Err(FilterError::TriangulationFailed("reprojection cost above χ² bound"));
    }
    Ok(anchor.to_reference(&Vec3::new(x.x / x.z, x.y / x.z, 1.0 / x.z)))
}

/// Orthonormal basis of the left null space of `h_f` (rows × 3, full column rank).
pub fn left_null_space(h_f: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = h_f.nrows();
    let mut aug = DMatrix::zeros(rows, 3 + rows);
    aug.columns_mut(0, 3).copy_from(h_f);
    aug.columns_mut(3, rows).fill_with_identity();
    let q = aug.qr().q();
    q.columns(3, rows - 3).into_owned()
}

/// Null-space-projected residual and device Jacobian of one feature track.
#[derive(Debug, Clone)]
pub struct ProjectedTrack {
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
    /// Observations kept (the rest were behind a camera).
    pub used: usize,
}

/// Builds `(H°, r°)` for a track observed at the given clone frames.
pub fn project_track(
    cam: &CameraModel,
    state: &DeviceState,
    frames: &[usize],
    pixels: &[Vector2<f64>],
    p_f: &Vec3,
) -> Result<ProjectedTrack, FilterError> {
    let mut idx = Vec::with_capacity(frames.len());
    let mut poses = Vec::with_capacity(frames.len());
    for f in frames {
        let i = state.clone_index(*f).ok_or(FilterError::TriangulationFailed("observation outside window"))?;
        idx.push(i);
        poses.push(state.clones[i].pose);
    }
    let all: Vec<usize> = (0..poses.len()).collect();
    let (jac, _) = local_feature_jacobians(cam, &poses, &all, p_f);
    if jac.len() < 2 {
        return Err(FilterError::TriangulationFailed("fewer than two usable observations"));
    }
    let m = jac.len();
    let d = state.dim();
    let mut hx = DMatrix::zeros(2 * m, d);
    let mut hf = DMatrix::zeros(2 * m, 3);
    let mut r = DVector::zeros(2 * m);
    for (k, o) in jac.iter().enumerate() {
        let off = state.clone_offset(idx[o.pose]);
        hx.view_mut((2 * k, off), (2, 3)).copy_from(&o.d_theta);
        hx.view_mut((2 * k, off + 3), (2, 3)).copy_from(&o.d_position);
        hf.view_mut((2 * k, 0), (2, 3)).copy_from(&o.d_feature);
        r.rows_mut(2 * k, 2).copy_from(&(pixels[o.pose] - o.predicted));
    }
    debug_assert!(CLONE_DIM == 6);
    let u = left_null_space(&hf);
    Ok(ProjectedTrack { h: u.transpose() * hx, r: u.transpose() * r, used: m })
}

/// Thin-QR compression of a tall stacked system; noise stays isotropic.
pub fn compress(h: DMatrix<f64>, r: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    if h.nrows() <= h.ncols() {
        return (h, r);
    }
    let qr = h.qr();
    let q = qr.q();
    (qr.r(), q.transpose() * r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::exp_so3;
    use nalgebra::UnitQuaternion;

    #[test]
    fn null_space_annihilates_feature_jacobian() {
        let hf = DMatrix::from_fn(10, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let u = left_null_space(&hf);
        assert_eq!(u.ncols(), 7);
        assert!((u.transpose() * &hf).amax() < 1e-12);
        assert!((u.transpose() * &u - DMatrix::identity(7, 7)).amax() < 1e-12);
    }

    #[test]
    fn triangulates_exact_point() {
        let cam = CameraModel::default();
        let target = Vec3::new(0.3, -0.2, 4.0);
        let poses: Vec<Pose> = (0..4)
            .map(|k| Pose::new(exp_so3(&Vec3::new(0.0, 0.02 * k as f64, 0.0)) * UnitQuaternion::identity(), Vec3::new(0.15 * k as f64, 0.0, 0.0)))
            .collect();
        let px: Vec<_> = poses.iter().map(|p| cam.project(&p.to_body(&target)).unwrap()).collect();
        let est = triangulate(&cam, &poses, &px, 1.0).unwrap();
        assert!((est - target).norm() < 1e-9);
        let mut bad = px.clone();
        bad[2].x += 40.0;
        assert!(triangulate(&cam, &poses, &bad, 1.0).is_err());
    }

    #[test]
    fn compression_preserves_information() {
        let h = DMatrix::from_fn(12, 4, |i, j| ((i + 2 * j) % 7) as f64 - 3.0);
        let r = DVector::from_fn(12, |i, _| i as f64 * 0.1);
        let (hc, rc) = compress(h.clone(), r.clone());
        assert_eq!(hc.nrows(), 4);
        assert!((hc.transpose() * &hc - h.transpose() * &h).amax() < 1e-10);
        assert!((hc.transpose() * rc - h.transpose() * r).amax() < 1e-10);
    }
}
