//! Dense reference implementations over a materialized joint covariance.

use nalgebra::{DMatrix, DVector};

use super::belief::{insert_zero_block, spd_factor, symmetrize, FilterBelief};
use super::propagation::Mat15;
use super::state::{CLONE_DIM, EVOLVING_DIM, TRANSFORM_DIM};
use super::FilterError;
use crate::sparse::SparseLowerTriangular;

/// Outcome of one dense update.
#[derive(Debug, Clone)]
pub struct DenseUpdate {
    pub dx: DVector<f64>,
    /// Gain as applied (rows at and after `nuisance_start` zeroed for SKF).
    pub gain: DMatrix<f64>,
    pub innovation: DMatrix<f64>,
}

fn joseph(p: &DMatrix<f64>, h: &DMatrix<f64>, k: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    let ikh = DMatrix::identity(n, n) - k * h;
    let mut out = &ikh * p * ikh.transpose() + k * r * k.transpose();
    symmetrize(&mut out);
    out
}

fn optimal_gain(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), FilterError> {
    let pht = p * h.transpose();
    let s = h * &pht + r;
    let chol = spd_factor(&s)?;
    Ok((chol.solve(&pht.transpose()).transpose(), s))
}

/// Schmidt update: states from `nuisance_start` on keep their estimate and
/// covariance; the covariance follows the Joseph form for the zeroed gain.
pub fn dense_skf_update(
    x: &mut DVector<f64>,
    p: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    r_res: &DVector<f64>,
    r: &DMatrix<f64>,
    nuisance_start: usize,
) -> Result<DenseUpdate, FilterError> {
    let (mut k, s) = optimal_gain(p, h, r)?;
    let n = p.nrows();
    k.rows_mut(nuisance_start, n - nuisance_start).fill(0.0);
    let dx = &k * r_res;
    *x += &dx;
    *p = joseph(p, h, &k, r);
    Ok(DenseUpdate { dx, gain: k, innovation: s })
}

/// Full EKF update in Joseph form.
pub fn dense_ekf_update(
    x: &mut DVector<f64>,
    p: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    r_res: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Result<DenseUpdate, FilterError> {
    let (k, s) = optimal_gain(p, h, r)?;
    let dx = &k * r_res;
    *x += &dx;
    *p = joseph(p, h, &k, r);
    Ok(DenseUpdate { dx, gain: k, innovation: s })
}

/// Materialized joint covariance `[device | map₁ | … | map_L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseJoint {
    pub p: DMatrix<f64>,
    pub device_dim: usize,
    pub map_dims: Vec<usize>,
}

impl DenseJoint {
    /// Materializes the joint covariance implied by a factorized belief.
    pub fn from_belief(belief: &FilterBelief, factors: &[&SparseLowerTriangular]) -> Self {
        let d = belief.dim();
        let map_dims: Vec<usize> = factors.iter().map(|f| f.dim()).collect();
        let total = d + map_dims.iter().sum::<usize>();
        let mut p = DMatrix::zeros(total, total);
        p.view_mut((0, 0), (d, d)).copy_from(&belief.p_rr);
        let mut o = d;
        for (i, f) in factors.iter().enumerate() {
            let n = f.dim();
            p.view_mut((o, o), (n, n)).copy_from(&f.dense_inverse());
            if let Some(g) = &belief.gamma[i] {
                let cross = g * f.dense_whitener();
                p.view_mut((0, o), (d, n)).copy_from(&cross);
                p.view_mut((o, 0), (n, d)).copy_from(&cross.transpose());
            }
            o += n;
        }
        symmetrize(&mut p);
        Self { p, device_dim: d, map_dims }
    }

    pub fn map_offset(&self, submap: usize) -> usize {
        self.device_dim + self.map_dims[..submap].iter().sum::<usize>()
    }

    pub fn device_block(&self) -> DMatrix<f64> {
        self.p.view((0, 0), (self.device_dim, self.device_dim)).into_owned()
    }

    pub fn cross_block(&self, submap: usize) -> DMatrix<f64> {
        let o = self.map_offset(submap);
        self.p.view((0, o), (self.device_dim, self.map_dims[submap])).into_owned()
    }

    pub fn map_block(&self, submap: usize) -> DMatrix<f64> {
        let (o, n) = (self.map_offset(submap), self.map_dims[submap]);
        self.p.view((o, o), (n, n)).into_owned()
    }

    fn total(&self) -> usize {
        self.p.nrows()
    }

    /// Joint propagation: `Φ_joint = blockdiag(Φ, I)` and `Q` on the evolving block.
    pub fn propagate(&mut self, phi: &Mat15, q: &Mat15) {
        let n = self.total();
        let mut f = DMatrix::identity(n, n);
        f.view_mut((0, 0), (EVOLVING_DIM, EVOLVING_DIM)).copy_from(phi);
        let mut p = &f * &self.p * f.transpose();
        let mut blk = p.view_mut((0, 0), (EVOLVING_DIM, EVOLVING_DIM));
        blk += q;
        symmetrize(&mut p);
        self.p = p;
    }

    /// Clone augmentation by the explicit selection Jacobian, new rows placed
    /// right after the device block.
    pub fn augment_clone(&mut self) {
        let (n, d) = (self.total(), self.device_dim);
        let mut j = DMatrix::zeros(n + CLONE_DIM, n);
        for k in 0..d {
            j[(k, k)] = 1.0;
        }
        for k in 0..CLONE_DIM {
            j[(d + k, k)] = 1.0;
        }
        for k in d..n {
            j[(k + CLONE_DIM, k)] = 1.0;
        }
        self.p = &j * &self.p * j.transpose();
        self.device_dim += CLONE_DIM;
    }

    pub fn remove_block(&mut self, offset: usize, len: usize) {
        self.p = self.p.clone().remove_rows(offset, len).remove_columns(offset, len);
        self.device_dim -= len;
    }

    /// Schmidt update with a device-only Jacobian.
    pub fn local_update(&mut self, h: &DMatrix<f64>, r: &DVector<f64>, sigma: f64) -> Result<DVector<f64>, FilterError> {
        let mut hj = DMatrix::zeros(h.nrows(), self.total());
        hj.columns_mut(0, self.device_dim).copy_from(h);
        self.skf(&hj, r, sigma)
    }

    pub fn map_update(
        &mut self,
        submap: usize,
        h_r: &DMatrix<f64>,
        h_m: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma: f64,
    ) -> Result<DVector<f64>, FilterError> {
        let mut hj = DMatrix::zeros(h_r.nrows(), self.total());
        hj.columns_mut(0, self.device_dim).copy_from(h_r);
        hj.columns_mut(self.map_offset(submap), self.map_dims[submap]).copy_from(h_m);
        self.skf(&hj, r, sigma)
    }

    fn skf(&mut self, h: &DMatrix<f64>, r: &DVector<f64>, sigma: f64) -> Result<DVector<f64>, FilterError> {
        let mut x = DVector::zeros(self.total());
        let rn = DMatrix::identity(r.len(), r.len()) * (sigma * sigma);
        let up = dense_skf_update(&mut x, &mut self.p, h, r, &rn, self.device_dim)?;
        Ok(up.dx.rows(0, self.device_dim).into_owned())
    }

    /// Innovation covariance of a batch against sub-map `i`.
    pub fn innovation_covariance(&self, submap: usize, h_r: &DMatrix<f64>, h_m: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
        let mut hj = DMatrix::zeros(h_r.nrows(), self.total());
        hj.columns_mut(0, self.device_dim).copy_from(h_r);
        hj.columns_mut(self.map_offset(submap), self.map_dims[submap]).copy_from(h_m);
        let mut s = &hj * &self.p * hj.transpose();
        for k in 0..s.nrows() {
            s[(k, k)] += sigma * sigma;
        }
        s
    }

    /// Transform initialization as an ordinary Schmidt update on a state
    /// augmented with `τ` under the explicit prior `μ I`.
    #[allow(clippy::too_many_arguments)]
    pub fn initialize_transform(
        &mut self,
        submap: usize,
        insert_at: usize,
        h_r: &DMatrix<f64>,
        h_tau: &DMatrix<f64>,
        h_m: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma: f64,
        mu: f64,
    ) -> Result<(DVector<f64>, DVector<f64>), FilterError> {
        let d = self.device_dim;
        self.p = insert_zero_block(&self.p, insert_at, TRANSFORM_DIM);
        for k in 0..TRANSFORM_DIM {
            self.p[(insert_at + k, insert_at + k)] = mu;
        }
        self.device_dim += TRANSFORM_DIM;
        let mut h_dev = DMatrix::zeros(h_r.nrows(), d + TRANSFORM_DIM);
        for c in 0..d {
            let to = if c < insert_at { c } else { c + TRANSFORM_DIM };
            h_dev.column_mut(to).copy_from(&h_r.column(c));
        }
        h_dev.columns_mut(insert_at, TRANSFORM_DIM).copy_from(h_tau);
        let dx = self.map_update(submap, &h_dev, h_m, r, sigma)?;
        let mut dx_r = DVector::zeros(d);
        for c in 0..d {
            dx_r[c] = dx[if c < insert_at { c } else { c + TRANSFORM_DIM }];
        }
        Ok((dx_r, dx.rows(insert_at, TRANSFORM_DIM).into_owned()))
    }

    /// Transform initialization in the limit of an unbounded prior on `τ`:
    /// `K_τ = (H_τᵀS⁻¹H_τ)⁻¹H_τᵀS⁻¹`, the remaining gain projected off `H_τ`
    /// with its map rows zeroed, and the covariance of the resulting linear
    /// error map taken exactly.
    #[allow(clippy::too_many_arguments)]
    pub fn initialize_transform_flat(
        &mut self,
        submap: usize,
        insert_at: usize,
        h_r: &DMatrix<f64>,
        h_tau: &DMatrix<f64>,
        h_m: &DMatrix<f64>,
        r: &DVector<f64>,
        sigma: f64,
    ) -> Result<(DVector<f64>, DVector<f64>), FilterError> {
        let m = h_tau.nrows();
        let n = self.total();
        let d = self.device_dim;
        let var = sigma * sigma;
        let mut hj = DMatrix::zeros(m, n);
        hj.columns_mut(0, d).copy_from(h_r);
        hj.columns_mut(self.map_offset(submap), self.map_dims[submap]).copy_from(h_m);

        let pht = &self.p * hj.transpose();
        let mut s = &hj * &pht;
        for k in 0..m {
            s[(k, k)] += var;
        }
        let s_inv = spd_factor(&s)?.inverse();
        let ht_sinv = h_tau.transpose() * &s_inv;
        let w = &ht_sinv * h_tau;
        let w_inv = w.try_inverse().ok_or(FilterError::DegenerateGeometry { condition: f64::INFINITY })?;
        let k_tau = &w_inv * ht_sinv;
        let proj = DMatrix::identity(m, m) - h_tau * &k_tau;
        let mut k_x = pht * s_inv * proj;
        k_x.rows_mut(d, n - d).fill(0.0);

        let dx = &k_x * r;
        let dx_tau = &k_tau * r;
        let top = DMatrix::identity(n, n) - &k_x * &hj;
        let mut p_xx = &top * &self.p * top.transpose() + &k_x * k_x.transpose() * var;
        symmetrize(&mut p_xx);
        let p_tx = -(&k_tau * &hj * &self.p * top.transpose()) + &k_tau * k_x.transpose() * var;
        let mut p_tt = &k_tau * &s * k_tau.transpose();
        symmetrize(&mut p_tt);

        let mut p = insert_zero_block(&p_xx, insert_at, TRANSFORM_DIM);
        for c in 0..n {
            let to = if c < insert_at { c } else { c + TRANSFORM_DIM };
            for k in 0..TRANSFORM_DIM {
                p[(insert_at + k, to)] = p_tx[(k, c)];
                p[(to, insert_at + k)] = p_tx[(k, c)];
            }
        }
        p.view_mut((insert_at, insert_at), (TRANSFORM_DIM, TRANSFORM_DIM)).copy_from(&p_tt);
        self.p = p;
        self.device_dim += TRANSFORM_DIM;
        Ok((dx.rows(0, d).into_owned(), dx_tau))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5)
    }

    fn joint(rng: &mut ChaCha8Rng, d: usize, m: usize) -> DenseJoint {
        let a = random(rng, d + m, d + m + 3);
        let p = &a * a.transpose() + DMatrix::identity(d + m, d + m) * 0.1;
        DenseJoint { p, device_dim: d, map_dims: vec![m] }
    }

    #[test]
    fn growing_prior_approaches_flat_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = joint(&mut rng, 9, 12);
        let (h_r, h_tau, h_m) = (random(&mut rng, 10, 9), random(&mut rng, 10, 4), random(&mut rng, 10, 12));
        let r = random(&mut rng, 10, 1).column(0).into_owned();
        let mut flat = base.clone();
        let (dx, dt) = flat.initialize_transform_flat(0, 3, &h_r, &h_tau, &h_m, &r, 0.5).unwrap();
        let gap = |mu: f64| {
            let mut j = base.clone();
            let (dx_mu, dt_mu) = j.initialize_transform(0, 3, &h_r, &h_tau, &h_m, &r, 0.5, mu).unwrap();
            (&j.p - &flat.p).amax().max((&dx_mu - &dx).amax()).max((&dt_mu - &dt).amax())
        };
        let (g4, g6) = (gap(1e4), gap(1e6));
        assert!(g6 < 1e-4, "{g6}");
        assert!(g4 / g6 > 50.0, "{g4} {g6}");
    }

    #[test]
    fn rank_deficient_transform_jacobian_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut j = joint(&mut rng, 6, 6);
        let mut deficient = DMatrix::from_fn(6, 4, |i, k| if i == k { 1.0 } else { 0.0 });
        deficient.column_mut(3).fill(0.0);
        let r = DVector::zeros(6);
        let err = j.initialize_transform_flat(0, 6, &random(&mut rng, 6, 6), &deficient, &random(&mut rng, 6, 6), &r, 1.0);
        assert!(matches!(err, Err(FilterError::DegenerateGeometry { .. })));
    }
}
