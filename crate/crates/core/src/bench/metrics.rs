//! Accuracy and consistency statistics over estimator trajectories.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::filter::chi2_quantile;
use crate::geom::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("position covariance at sample {0} is singular")]
    SingularCovariance(usize),
    #[error("error and covariance series differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    Empty,
}

/// Root-mean-square of the error norms.
pub fn rmse(errors: &[Vec3]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    (errors.iter().map(|e| e.norm_squared()).sum::<f64>() / errors.len() as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Two-sided 95% bounds on the average of `runs` independent χ²_dof
/// samples.
pub fn anees_bounds(dof: usize, runs: usize) -> (f64, f64) {
    let n = (dof * runs.max(1)) as f64;
    let k = runs.max(1) as f64;
    (chi2_quantile(n as usize, 0.025) / k, chi2_quantile(n as usize, 0.975) / k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeesSeries {
    pub values: Vec<f64>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Share of samples outside `[lower, upper]`.
    pub fraction_outside: f64,
}

/// Per-sample NEES `eᵀ P⁻¹ e` with single-run χ²₃ bounds.
pub fn nees_series(errors: &[Vec3], covariances: &[Matrix3<f64>]) -> Result<NeesSeries, MetricsError> {
    if errors.len() != covariances.len() {
        return Err(MetricsError::LengthMismatch(errors.len(), covariances.len()));
    }
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut values = Vec::with_capacity(errors.len());
    for (k, (e, p)) in errors.iter().zip(covariances).enumerate() {
        let chol = p.cholesky().ok_or(MetricsError::SingularCovariance(k))?;
        values.push(e.dot(&chol.solve(e)));
    }
    let (lower, upper) = anees_bounds(3, 1);
    let outside = values.iter().filter(|v| **v < lower || **v > upper).count();
    Ok(NeesSeries {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        fraction_outside: outside as f64 / values.len() as f64,
        values,
        lower,
        upper,
    })
}

/// Frame-wise average over runs, then averaged over frames. All series
/// must have the same length.
pub fn average_nees(series: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let first = series.first().ok_or(MetricsError::Empty)?;
    if first.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(bad) = series.iter().find(|s| s.len() != first.len()) {
        return Err(MetricsError::LengthMismatch(first.len(), bad.len()));
    }
    let frames = first.len();
    let total: f64 = (0..frames).map(|k| series.iter().map(|s| s[k]).sum::<f64>() / series.len() as f64).sum();
    Ok(total / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn calibrated_errors_fall_inside_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Matrix3::new(4.0, 1.0, 0.0, 1.0, 2.0, 0.3, 0.0, 0.3, 1.0);
        let l = p.cholesky().unwrap().l();
        let errors: Vec<Vec3> =
            (0..4000).map(|_| l * Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng))).collect();
        let s = nees_series(&errors, &vec![p; errors.len()]).unwrap();
        assert!((s.mean - 3.0).abs() < 0.15, "{}", s.mean);
        assert!((s.fraction_outside - 0.05).abs() < 0.015, "{}", s.fraction_outside);
    }

    #[test]
    fn zero_error_gives_zero_nees() {
        let s = nees_series(&[Vec3::zeros(); 4], &[Matrix3::identity(); 4]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn halved_covariance_doubles_nees() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Matrix3::new(1.0, 0.2, 0.0, 0.2, 3.0, 0.5, 0.0, 0.5, 2.0);
        let l = p.cholesky().unwrap().l();
        let errors: Vec<Vec3> =
            (0..10_000).map(|_| l * Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng))).collect();
        let s = nees_series(&errors, &vec![p * 0.5; errors.len()]).unwrap();
        assert!((s.mean - 6.0).abs() < 0.2, "{}", s.mean);
    }

    #[test]
    fn singular_covariance_is_reported() {
        let e = vec![Vec3::zeros(); 2];
        let p = vec![Matrix3::identity(), Matrix3::zeros()];
        assert_eq!(nees_series(&e, &p), Err(MetricsError::SingularCovariance(1)));
    }

    #[test]
    fn bounds_tighten_with_runs() {
        let (l1, u1) = anees_bounds(3, 1);
        let (l50, u50) = anees_bounds(3, 50);
        assert!((l1 - 0.2158).abs() < 1e-3 && (u1 - 9.3484).abs() < 1e-3);
        assert!(l50 > l1 && u50 < u1 && l50 < 3.0 && u50 > 3.0);
    }

    proptest! {
        #[test]
        fn rmse_scales_linearly(v in prop::collection::vec(-5.0f64..5.0, 3..30), k in 0.1f64..10.0) {
            let e: Vec<Vec3> = v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let scaled: Vec<Vec3> = e.iter().map(|x| x * k).collect();
            prop_assert!((rmse(&scaled) - k * rmse(&e)).abs() <= 1e-9 * (1.0 + k * rmse(&e)));
        }

        #[test]
        fn median_is_order_invariant(mut v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let m = median(&v);
            v.reverse();
            prop_assert_eq!(m, median(&v));
        }
    }
}
