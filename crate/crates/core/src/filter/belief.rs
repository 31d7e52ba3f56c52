//! Factorized covariance: the device block `P_RR` and one cross factor `Γᵢ`
//! per initialized sub-map with `P_RMᵢ = Γᵢ Gᵢ⁻¹ Pᵢ`. The map block is only
//! ever touched through `Gᵢ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::propagation::Mat15;
use super::state::{CLONE_DIM, EVOLVING_DIM, TRANSFORM_DIM};
use super::FilterError;
use crate::sparse::SparseLowerTriangular;

/// Largest accepted condition number of `H_τᵀ A⁻¹ H_τ` at initialization.
pub const MAX_INIT_CONDITION: f64 = 1e8;

pub(crate) fn spd_factor(s: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, FilterError> {
    let sym = (s + s.transpose()) * 0.5;
    Cholesky::new(sym).ok_or(FilterError::SingularInnovation)
}

pub(crate) fn symmetrize(p: &mut DMatrix<f64>) -> f64 {
    let asym = (&*p - p.transpose()).amax();
    let s = (&*p + p.transpose()) * 0.5;
    *p = s;
    asym
}

/// `Jᵀ = G⁻¹ P H_Mᵀ` returned as `J` (rows = measurements).
pub fn whitened_map_jacobian(factor: &SparseLowerTriangular, h_m: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    Ok(factor.back_solve_transposed(&h_m.transpose())?.transpose())
}

/// Inserts `count` zero rows and columns at `at`.
pub(crate) fn insert_zero_block(m: &DMatrix<f64>, at: usize, count: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n + count, n + count);
    let (a, b) = (at, n - at);
    out.view_mut((0, 0), (a, a)).copy_from(&m.view((0, 0), (a, a)));
    out.view_mut((0, a + count), (a, b)).copy_from(&m.view((0, a), (a, b)));
    out.view_mut((a + count, 0), (b, a)).copy_from(&m.view((a, 0), (b, a)));
    out.view_mut((a + count, a + count), (b, b)).copy_from(&m.view((a, a), (b, b)));
    out
}

pub(crate) fn insert_zero_rows(m: &DMatrix<f64>, at: usize, count: usize) -> DMatrix<f64> {
    m.clone().insert_rows(at, count, 0.0)
}

/// Running totals of the largest symmetry defect seen before symmetrization.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BeliefDiagnostics {
    pub max_asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBelief {
    pub p_rr: DMatrix<f64>,
    /// `Γᵢ` (device dim × dim Gᵢ), present once sub-map `i` is initialized.
    pub gamma: Vec<Option<DMatrix<f64>>>,
    pub diagnostics: BeliefDiagnostics,
}

impl FilterBelief {
    pub fn new(p0: DMatrix<f64>, submaps: usize) -> Self {
        assert_eq!(p0.nrows(), EVOLVING_DIM);
        Self { p_rr: p0, gamma: vec![None; submaps], diagnostics: BeliefDiagnostics::default() }
    }

    pub fn dim(&self) -> usize {
        self.p_rr.nrows()
    }

    fn track_symmetry(&mut self) {
        let a = symmetrize(&mut self.p_rr);
        self.diagnostics.max_asymmetry = self.diagnostics.max_asymmetry.max(a);
    }

    /// `P_EE ← Φ P_EE Φᵀ + Q`, `P_E· ← Φ P_E·`, and `Γᵢ[E] ← Φ Γᵢ[E]`.
    pub fn propagate(&mut self, phi: &Mat15, q: &Mat15) {
        let d = self.dim();
        let e = EVOLVING_DIM;
        let phi = DMatrix::from_column_slice(e, e, phi.as_slice());
        let top = &phi * self.p_rr.rows(0, e);
        self.p_rr.rows_mut(0, e).copy_from(&top);
        let left = self.p_rr.columns(0, e) * phi.transpose();
        self.p_rr.columns_mut(0, e).copy_from(&left);
        let mut block = self.p_rr.view_mut((0, 0), (e, e));
        block += DMatrix::from_column_slice(e, e, q.as_slice());
        debug_assert_eq!(self.p_rr.nrows(), d);
        for g in self.gamma.iter_mut().flatten() {
            let rows = &phi * g.rows(0, e);
            g.rows_mut(0, e).copy_from(&rows);
        }
        self.track_symmetry();
    }

    /// Appends a clone of the current pose `(δθ, δp)` at the end of the state.
    pub fn augment_clone(&mut self) {
        let d = self.dim();
        let mut j = DMatrix::zeros(d + CLONE_DIM, d);
        j.view_mut((0, 0), (d, d)).fill_with_identity();
        j.view_mut((d, 0), (CLONE_DIM, CLONE_DIM)).fill_with_identity();
        self.p_rr = &j * &self.p_rr * j.transpose();
        for g in self.gamma.iter_mut().flatten() {
            let rows = g.rows(0, CLONE_DIM).into_owned();
            *g = g.clone().insert_rows(d, CLONE_DIM, 0.0);
            g.rows_mut(d, CLONE_DIM).copy_from(&rows);
        }
    }

    /// Marginalizes a block of the device state (e.g. the oldest clone).
    pub fn remove_block(&mut self, offset: usize, len: usize) {
        self.p_rr = self.p_rr.clone().remove_rows(offset, len).remove_columns(offset, len);
        for g in self.gamma.iter_mut().flatten() {
            *g = g.clone().remove_rows(offset, len);
        }
    }

    /// Update whose measurement does not involve any map state: standard EKF
    /// on `P_RR`, zero map gain, `Γᵢ ← (I − P Hᵀ S⁻¹ H) Γᵢ`.
    pub fn local_update(&mut self, h: &DMatrix<f64>, r: &DVector<f64>, sigma: f64) -> Result<DVector<f64>, FilterError> {
        let ph = &self.p_rr * h.transpose();
        let mut s = h * &ph;
        for i in 0..s.nrows() {
            s[(i, i)] += sigma * sigma;
        }
        let chol = spd_factor(&s)?;
        let dx = &ph * chol.solve(r);
        let sinv_pht = chol.solve(&ph.transpose());
        self.p_rr -= &ph * &sinv_pht;
        for g in self.gamma.iter_mut().flatten() {
            let hg = h * &*g;
            *g -= &ph * chol.solve(&hg);
        }
        self.track_symmetry();
        Ok(dx)
    }

    /// Full innovation covariance of a batch against sub-map `i` (`None` =
    /// the map is treated as exact).
    pub fn innovation_covariance(
        &self,
        submap: usize,
        factor: Option<&SparseLowerTriangular>,
        h_r: &DMatrix<f64>,
        h_m: &DMatrix<f64>,
        sigma: f64,
    ) -> Result<DMatrix<f64>, FilterError> {
        let mut s = h_r * &self.p_rr * h_r.transpose();
        if let Some(f) = factor {
            let j = whitened_map_jacobian(f, h_m)?;
            s += &j * j.transpose();
            if let Some(g) = &self.gamma[submap] {
                let cross = h_r * g * j.transpose();
                s += &cross + cross.transpose();
            }
        }
        for i in 0..s.nrows() {
            s[(i, i)] += sigma * sigma;
        }
        Ok(s)
    }

    /// C-SKF / sC-SKF update against sub-map `i`: `K̄ = P H_Rᵀ + Γᵢ Jᵀ`,
    /// `Γᵢ⁺ = Γᵢ − K̄ S⁻¹ (H_R Γᵢ + J)`, `Γₘ⁺ = Γₘ − K̄ S⁻¹ H_R Γₘ` for m ≠ i.
    pub fn map_update(
        &mut self,
        submap: usize,
        factor: &SparseLowerTriangular,
        h_r: &DMatrix<f64>,
        h_m: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma: f64,
    ) -> Result<DVector<f64>, FilterError> {
        let gi = self.gamma[submap].as_ref().ok_or(FilterError::TransformNotInitialized(submap))?;
        let j = whitened_map_jacobian(factor, h_m)?;
        let kbar = &self.p_rr * h_r.transpose() + gi * j.transpose();
        let hg_i = h_r * gi + &j;
        let mut s = h_r * &kbar + &j * (gi.transpose() * h_r.transpose() + j.transpose());
        for k in 0..s.nrows() {
            s[(k, k)] += sigma * sigma;
        }
        let chol = spd_factor(&s)?;
        let dx = &kbar * chol.solve(r);
        self.p_rr -= &kbar * chol.solve(&kbar.transpose());
        for (m, g) in self.gamma.iter_mut().enumerate() {
            let Some(g) = g else { continue };
            let rhs = if m == submap { hg_i.clone() } else { h_r * &*g };
            *g -= &kbar * chol.solve(&rhs);
        }
        self.track_symmetry();
        Ok(dx)
    }

    /// Initializes transform `i` in the infinite-prior limit. The new 4 rows
    /// are inserted at `insert_at`. Returns `(δx_R, δx_τ)` with `δx_R` over the
    /// pre-existing device state. `factor = None` treats the map as exact
    /// and creates no `Γᵢ`.
    #[allow(clippy::too_many_arguments)]
    pub fn initialize_transform(
        &mut self,
        submap: usize,
        factor: Option<&SparseLowerTriangular>,
        insert_at: usize,
        h_r: &DMatrix<f64>,
        h_tau: &DMatrix<f64>,
        h_m: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma: f64,
    ) -> Result<(DVector<f64>, DVector<f64>), FilterError> {
        if self.gamma[submap].is_some() {
            return Err(FilterError::AlreadyInitialized(submap));
        }
        let m = r.len();
        if m < 2 * 2 {
            return Err(FilterError::InsufficientFeatures { found: m / 2, required: 2 });
        }
        let j = match factor {
            Some(f) => Some(whitened_map_jacobian(f, h_m)?),
            None => None,
        };
        let ph = &self.p_rr * h_r.transpose();
        let mut a = h_r * &ph;
        if let Some(j) = &j {
            a += j * j.transpose();
        }
        for k in 0..m {
            a[(k, k)] += sigma * sigma;
        }
        let a_chol = spd_factor(&a)?;
        let ai_ht = a_chol.solve(h_tau);
        let n = h_tau.transpose() * &ai_ht;
        let n = (&n + n.transpose()) * 0.5;
        let eig = n.clone().symmetric_eigen();
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(lo > 0.0) || hi / lo > MAX_INIT_CONDITION {
            return Err(FilterError::DegenerateGeometry { condition: if lo > 0.0 { hi / lo } else { f64::INFINITY } });
        }
        let n_chol = spd_factor(&n)?;
        let p_tt = n_chol.inverse();
        // K_τ = N⁻¹ H_τᵀ A⁻¹, W = A⁻¹ − A⁻¹ H_τ K_τ.
        let k_tau = n_chol.solve(&ai_ht.transpose());
        let w = a_chol.inverse() - &ai_ht * &k_tau;
        let w = (&w + w.transpose()) * 0.5;
        let dx_tau = &k_tau * r;
        let dx_r = &ph * (&w * r);
        let ph_w = &ph * &w;

        let d = self.dim();
        let mut p_new = insert_zero_block(&self.p_rr, insert_at, TRANSFORM_DIM);
        let p_rr_plus = &self.p_rr - &ph_w * ph.transpose();
        let p_tr = -(&k_tau * ph.transpose());
        let idx = |k: usize| if k < insert_at { k } else { k + TRANSFORM_DIM };
        for a_ in 0..d {
            for b_ in 0..d {
                p_new[(idx(a_), idx(b_))] = p_rr_plus[(a_, b_)];
            }
            for t in 0..TRANSFORM_DIM {
                p_new[(insert_at + t, idx(a_))] = p_tr[(t, a_)];
                p_new[(idx(a_), insert_at + t)] = p_tr[(t, a_)];
            }
        }
        p_new.view_mut((insert_at, insert_at), (TRANSFORM_DIM, TRANSFORM_DIM)).copy_from(&p_tt);

        let place = |top: DMatrix<f64>, tau: DMatrix<f64>| {
            let mut g = insert_zero_rows(&top, insert_at, TRANSFORM_DIM);
            g.rows_mut(insert_at, TRANSFORM_DIM).copy_from(&tau);
            g
        };
        for g in self.gamma.iter_mut().flatten() {
            let hg = h_r * &*g;
            let top = &*g - &ph_w * &hg;
            let tau = -(&k_tau * &hg);
            *g = place(top, tau);
        }
        if let Some(j) = j {
            let top = -(&ph_w * &j);
            let tau = -(&k_tau * &j);
            self.gamma[submap] = Some(place(top, tau));
        }
        self.p_rr = p_new;
        self.track_symmetry();
        Ok((dx_r, dx_tau))
    }

    /// Dense `P_RMᵢ = Γᵢ Gᵢ⁻¹ Pᵢ` (tests and oracle use only).
    pub fn dense_cross_covariance(&self, submap: usize, factor: &SparseLowerTriangular) -> Option<DMatrix<f64>> {
        self.gamma[submap].as_ref().map(|g| g * factor.dense_whitener())
    }

    /// Bytes held by `P_RR` and all `Γᵢ`.
    pub fn storage_bytes(&self) -> usize {
        8 * (self.p_rr.len() + self.gamma.iter().flatten().map(|g| g.len()).sum::<usize>())
    }
}
