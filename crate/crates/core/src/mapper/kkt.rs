//! Dense checks of the sub-map relaxation: the exact constrained covariance
//! from the KKT inverse against the block-diagonal relaxed covariance.

use nalgebra::{DMatrix, DVector};

use crate::sparse::{min_eigenvalue, SparseError};

/// One equality-constrained QP step by orthogonal projection onto the
/// constraint null space: minimizes `½ dzᵀ H dz + gᵀ dz` s.t. `C dz = −c`.
pub fn dense_nullspace_solve(h: &DMatrix<f64>, g: &DVector<f64>, c_jac: &DMatrix<f64>, c: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.ncols();
    let pinv = c_jac.clone().pseudo_inverse(1e-12).ok()?;
    let dz0 = -(&pinv * c);
    let proj = DMatrix::identity(n, n) - &pinv * c_jac;
    // Reduced system on the null space, completed by the identity on its complement.
    let reduced = &proj * h * &proj + (DMatrix::identity(n, n) - &proj);
    let rhs = -(&proj * (g + h * &dz0));
    let y = reduced.lu().solve(&rhs)?;
    Some(dz0 + &proj * y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceBoundReport {
    /// `‖P − Pᵀ‖_max` of the extracted KKT block.
    pub asymmetry: f64,
    /// Smallest eigenvalue of `P̄ − P`.
    pub min_eig_difference: f64,
    /// `P̄ − P` passes the PSD test at the requested tolerance.
    pub difference_psd: bool,
    /// `‖M_W − AᵀXA‖_max / ‖AᵀXA‖_max`, `M_W` taken from the inverse of `W⁻¹`.
    pub m_relative_discrepancy: f64,
    /// Smallest eigenvalue of `AᵀXA` relative to its largest magnitude.
    pub m_min_eig_relative: f64,
    pub m_psd: bool,
    /// `‖P − (P̄ − P̄ M P̄)‖_max / ‖P̄‖_max`.
    pub lemma_residual: f64,
}

impl CovarianceBoundReport {
    pub fn passed(&self) -> bool {
        self.difference_psd && self.m_psd && self.m_relative_discrepancy < 1e-9
    }
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// Assembles `𝓚 = [[H₁,0,A₁ᵀ,0],[0,H₂,A₂ᵀ,0],[A₁,A₂,0,B],[0,0,Bᵀ,0]]`,
/// extracts `P = (𝓚⁻¹)₁:₂,₁:₂`, and compares it with `P̄ = blockdiag(H₁⁻¹, H₂⁻¹)`.
///
/// `flip_stationarity_sign` negates the second sub-map's constraint Jacobian
/// in the stationarity rows only (a sign error a verifier must catch).
pub fn covariance_bound_check(
    h1: &DMatrix<f64>,
    h2: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tol: f64,
    flip_stationarity_sign: bool,
) -> Result<CovarianceBoundReport, SparseError> {
    let (n1, n2, m) = (h1.nrows(), h2.nrows(), a1.nrows());
    let n = n1 + n2;
    let nt = if m == 0 { 0 } else { b.ncols() };
    let dim = n + m + nt;
    let sign = if flip_stationarity_sign { -1.0 } else { 1.0 };
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n1, n1)).copy_from(h1);
    k.view_mut((n1, n1), (n2, n2)).copy_from(h2);
    if m > 0 {
        k.view_mut((0, n), (n1, m)).copy_from(&a1.transpose());
        k.view_mut((n1, n), (n2, m)).copy_from(&(a2.transpose() * sign));
        k.view_mut((n, 0), (m, n1)).copy_from(a1);
        k.view_mut((n, n1), (m, n2)).copy_from(a2);
        k.view_mut((n, n + m), (m, nt)).copy_from(b);
        k.view_mut((n + m, n), (nt, m)).copy_from(&b.transpose());
    }
    let mut rhs = DMatrix::zeros(dim, n);
    rhs.view_mut((0, 0), (n, n)).fill_with_identity();
    let sol = k.lu().solve(&rhs).ok_or(SparseError::NotPositiveDefinite { column: 0 })?;
    let p_raw = sol.view((0, 0), (n, n)).into_owned();
    let asymmetry = (&p_raw - p_raw.transpose()).amax();
    let p = (&p_raw + p_raw.transpose()) * 0.5;

    let h1i = spd_inverse(h1).ok_or(SparseError::NotPositiveDefinite { column: 0 })?;
    let h2i = spd_inverse(h2).ok_or(SparseError::NotPositiveDefinite { column: n1 })?;
    let mut pbar = DMatrix::zeros(n, n);
    pbar.view_mut((0, 0), (n1, n1)).copy_from(&h1i);
    pbar.view_mut((n1, n1), (n2, n2)).copy_from(&h2i);
    let pbar = (&pbar + pbar.transpose()) * 0.5;
    let diff = &pbar - &p;
    let min_eig_difference = min_eigenvalue(&diff, tol.max(1e-12 * diff.amax()))?;

    if m == 0 {
        return Ok(CovarianceBoundReport {
            asymmetry,
            min_eig_difference,
            difference_psd: asymmetry <= tol && min_eig_difference >= -tol,
            m_relative_discrepancy: 0.0,
            m_min_eig_relative: 0.0,
            m_psd: true,
            lemma_residual: diff.amax() / pbar.amax().max(f64::MIN_POSITIVE),
        });
    }

    let mut a = DMatrix::zeros(m, n);
    a.view_mut((0, 0), (m, n1)).copy_from(a1);
    a.view_mut((0, n1), (m, n2)).copy_from(a2);
    let theta = a1 * &h1i * a1.transpose() + a2 * &h2i * a2.transpose();
    let theta = (&theta + theta.transpose()) * 0.5;

    // Route 1: invert W⁻¹ = [[Θ, −B], [−Bᵀ, 0]] and keep the leading block.
    let mut winv = DMatrix::zeros(m + nt, m + nt);
    winv.view_mut((0, 0), (m, m)).copy_from(&theta);
    winv.view_mut((0, m), (m, nt)).copy_from(&(-b));
    winv.view_mut((m, 0), (nt, m)).copy_from(&(-b.transpose()));
    let w = winv.try_inverse().ok_or(SparseError::NotPositiveDefinite { column: n })?;
    let w11 = w.view((0, 0), (m, m)).into_owned();
    let m_w = a.transpose() * &w11 * &a;

    // Route 2: the Schur-complement form X = Θ⁻¹ − Θ⁻¹B(BᵀΘ⁻¹B)⁻¹BᵀΘ⁻¹.
    let ti = spd_inverse(&theta).ok_or(SparseError::NotPositiveDefinite { column: n })?;
    let btb = b.transpose() * &ti * b;
    let btbi = spd_inverse(&btb).ok_or(SparseError::NotPositiveDefinite { column: n + m })?;
    let x = &ti - &ti * b * btbi * b.transpose() * &ti;
    let x = (&x + x.transpose()) * 0.5;
    let m_x = a.transpose() * x * &a;
    let m_x = (&m_x + m_x.transpose()) * 0.5;
    let scale = m_x.amax().max(f64::MIN_POSITIVE);
    let m_relative_discrepancy = (&m_w - &m_x).amax() / scale;
    let m_min = min_eigenvalue(&m_x, 1e-9 * scale)? / scale;

    let lemma = &pbar - &pbar * &m_w * &pbar;
    let lemma_residual = (&p - lemma).amax() / pbar.amax().max(f64::MIN_POSITIVE);

    Ok(CovarianceBoundReport {
        asymmetry,
        min_eig_difference,
        difference_psd: asymmetry <= tol && min_eig_difference >= -tol,
        m_relative_discrepancy,
        m_min_eig_relative: m_min,
        m_psd: m_min >= -1e-9,
        lemma_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nullspace_step_on_tiny_problem() {
        // min ½(x² + y²) s.t. x + y = 1 → x = y = ½.
        let h = DMatrix::identity(2, 2);
        let g = DVector::zeros(2);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let dz = dense_nullspace_solve(&h, &g, &c, &DVector::from_element(1, -1.0)).unwrap();
        assert!((dz[0] - 0.5).abs() < 1e-12 && (dz[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_constraints_give_relaxed_covariance() {
        let h1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h2 = DMatrix::from_row_slice(1, 1, &[4.0]);
        let rep = covariance_bound_check(&h1, &h2, &DMatrix::zeros(0, 2), &DMatrix::zeros(0, 1), &DMatrix::zeros(0, 4), 1e-8, false).unwrap();
        assert!(rep.lemma_residual < 1e-10);
        assert!(rep.passed());
    }
}
