//! Sparse symmetric assembly, Cholesky factorization and triangular solves.
//!
//! The map Hessian is assembled as a [`SparseSymmetric`] triplet list and
//! factored into a [`SparseLowerTriangular`] `G` with `G Gᵀ = P A Pᵀ`. Every
//! consumer of `G` goes through [`SparseLowerTriangular::back_solve_transposed`]
//! and [`SparseLowerTriangular::forward_solve`], which hide the permutation.

mod amd;
mod cholesky;
mod io;

use nalgebra::DMatrix;
use thiserror::Error;

pub use amd::approximate_minimum_degree;
pub use cholesky::cholesky;
pub use io::{read_factor, write_factor, FACTOR_MAGIC, FACTOR_VERSION};

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot at original column {column})")]
    NotPositiveDefinite { column: usize },
    #[error("dimension mismatch: expected {expected} rows, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error("symmetric eigenvalue iteration failed")]
    EigenFailure,
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported factor version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Elimination ordering used by [`cholesky`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    Natural,
    FillReducing,
}

/// Symmetric matrix staged as upper-triangle triplets; duplicates are summed
/// when the matrix is compressed.
#[derive(Debug, Clone, Default)]
pub struct SparseSymmetric {
    dim: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl SparseSymmetric {
    pub fn new(dim: usize) -> Self {
        Self { dim, triplets: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `value` at `(row, col)`; the mirrored entry is implied.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        let (r, c) = if row <= col { (row, col) } else { (col, row) };
        self.triplets.push((r, c, value));
    }

    /// Adds a dense symmetric block whose top-left corner sits at `(row, col)`.
    /// Only the upper triangle of the global matrix is stored, so off-diagonal
    /// blocks (row != col) should be added once.
    pub fn add_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) {
        for j in 0..block.ncols() {
            for i in 0..block.nrows() {
                let (gi, gj) = (row + i, col + j);
                if gi <= gj {
                    self.triplets.push((gi, gj, block[(i, j)]));
                }
            }
        }
    }

    pub fn triplet_count(&self) -> usize {
        self.triplets.len()
    }

    /// Upper-triangle CSC with summed duplicates and sorted row indices.
    pub(crate) fn to_upper_csc(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let n = self.dim;
        let mut sorted = self.triplets.clone();
        sorted.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for j in 0..n {
            col_ptr[j + 1] += col_ptr[j];
        }
        (col_ptr, row_idx, values)
    }

    /// Symmetric adjacency pattern (off-diagonal structure only).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.dim];
        for &(r, c, _) in &self.triplets {
            if r != c {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
            if r != c {
                m[(c, r)] += v;
            }
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut s = Self::new(m.nrows());
        for j in 0..m.ncols() {
            for i in 0..=j {
                if m[(i, j)] != 0.0 {
                    s.add(i, j, m[(i, j)]);
                }
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.to_upper_csc().2.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Lower-triangular Cholesky factor in compressed sparse column layout.
///
/// `G Gᵀ = P A Pᵀ` where `(P A Pᵀ)[k, l] = A[perm[k], perm[l]]`. Row indices
/// inside a column are strictly increasing and the diagonal is the first entry
/// of every column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLowerTriangular {
    dim: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f64>,
    perm: Vec<usize>,
}

impl SparseLowerTriangular {
    /// Builds a factor from raw parts, checking every structural invariant.
    pub fn from_parts(
        dim: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
        perm: Vec<usize>,
    ) -> Result<Self, SparseError> {
        if dim > u32::MAX as usize {
            return Err(SparseError::InvalidFactor(format!("dim {dim} exceeds 32-bit row indices")));
        }
        let row_idx = row_idx.into_iter().map(|r| u32::try_from(r).unwrap_or(u32::MAX)).collect();
        let g = Self { dim, col_ptr, row_idx, values, perm };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        let bad = |m: String| Err(SparseError::InvalidFactor(m));
        let n = self.dim;
        if n == 0 {
            return bad("dimension must be positive".into());
        }
        if self.col_ptr.len() != n + 1 || self.perm.len() != n {
            return bad("col_ptr/perm length does not match dim".into());
        }
        if self.col_ptr[0] != 0 || self.col_ptr[n] != self.row_idx.len() || self.row_idx.len() != self.values.len() {
            return bad("col_ptr does not span the stored entries".into());
        }
        let mut seen = vec![false; n];
        for &p in &self.perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return bad("perm is not a permutation".into());
            }
        }
        for j in 0..n {
            let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
            if a >= b || b > self.row_idx.len() {
                return bad(format!("column {j} is empty or col_ptr decreases"));
            }
            if self.row_idx[a] as usize != j || !(self.values[a] > 0.0) {
                return bad(format!("column {j} lacks a positive leading diagonal"));
            }
            for p in a + 1..b {
                if self.row_idx[p] <= self.row_idx[p - 1] || self.row_idx[p] as usize >= n {
                    return bad(format!("column {j} row indices not strictly increasing"));
                }
                if !self.values[p].is_finite() {
                    return bad(format!("column {j} holds a non-finite value"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[u32] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Bytes held by the factor: 8-byte values, 4-byte row indices, and
    /// 8-byte column pointers and permutation.
    pub fn storage_bytes(&self) -> usize {
        8 * (self.values.len() + self.col_ptr.len() + self.perm.len()) + 4 * self.row_idx.len()
    }

    /// Dense copy of `G` (permuted coordinates).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for j in 0..self.dim {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                m[(self.row_idx[p] as usize, j)] = self.values[p];
            }
        }
        m
    }

    /// Dense `Pᵀ G Gᵀ P`, i.e. the factored matrix in original coordinates.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let g = self.to_dense();
        let ggt = &g * g.transpose();
        let n = self.dim;
        let mut a = DMatrix::zeros(n, n);
        for k in 0..n {
            for l in 0..n {
                a[(self.perm[k], self.perm[l])] = ggt[(k, l)];
            }
        }
        a
    }

    /// Solves `G X = P B` for `X`. With `H = Pᵀ G Gᵀ P` this is the whitening
    /// `X = G⁻¹ P B`, so `Xᵀ X = Bᵀ H⁻¹ B`. The result lives in factor
    /// coordinates; `B` is given in original coordinates.
    pub fn back_solve_transposed(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>, SparseError> {
        if b.nrows() != self.dim {
            return Err(SparseError::DimensionMismatch { expected: self.dim, found: b.nrows() });
        }
        let n = self.dim;
        let mut x = DMatrix::zeros(n, b.ncols());
        for c in 0..b.ncols() {
            let src = b.column(c);
            let mut col = x.column_mut(c);
            let xs = col.as_mut_slice();
            for k in 0..n {
                xs[k] = src[self.perm[k]];
            }
            self.lower_solve_in_place(xs);
        }
        Ok(x)
    }

    /// Solves `Gᵀ Y = B` and returns `X = Pᵀ Y` in original coordinates. `B` is
    /// in factor coordinates, so `forward_solve(back_solve_transposed(B)) = H⁻¹ B`.
    pub fn forward_solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>, SparseError> {
        if b.nrows() != self.dim {
            return Err(SparseError::DimensionMismatch { expected: self.dim, found: b.nrows() });
        }
        let n = self.dim;
        let mut x = DMatrix::zeros(n, b.ncols());
        let mut work = vec![0.0; n];
        for c in 0..b.ncols() {
            work.copy_from_slice(b.column(c).as_slice());
            self.upper_solve_in_place(&mut work);
            let mut col = x.column_mut(c);
            for k in 0..n {
                col[self.perm[k]] = work[k];
            }
        }
        Ok(x)
    }

    /// In-place `G x = b` over permuted coordinates.
    pub(crate) fn lower_solve_in_place(&self, x: &mut [f64]) {
        for j in 0..self.dim {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let xj = x[j] / self.values[start];
            x[j] = xj;
            if xj != 0.0 {
                for p in start + 1..end {
                    x[self.row_idx[p] as usize] -= self.values[p] * xj;
                }
            }
        }
    }

    /// In-place `Gᵀ x = b` over permuted coordinates.
    pub(crate) fn upper_solve_in_place(&self, x: &mut [f64]) {
        for j in (0..self.dim).rev() {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let mut s = x[j];
            for p in start + 1..end {
                s -= self.values[p] * x[self.row_idx[p] as usize];
            }
            x[j] = s / self.values[start];
        }
    }

    /// `H⁻¹ B` through both triangular solves.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>, SparseError> {
        self.forward_solve(&self.back_solve_transposed(b)?)
    }

    /// Dense `H⁻¹` (test and oracle use only).
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let id = DMatrix::identity(self.dim, self.dim);
        let w = self.back_solve_transposed(&id).expect("square identity");
        self.forward_solve(&w).expect("square")
    }

    /// Dense `G⁻¹ P` as a matrix acting on original coordinates.
    pub fn dense_whitener(&self) -> DMatrix<f64> {
        self.back_solve_transposed(&DMatrix::identity(self.dim, self.dim)).expect("square identity")
    }
}

/// Positive-semidefiniteness test by symmetric eigen-decomposition:
/// true iff the smallest eigenvalue is at least `-tol`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> Result<bool, SparseError> {
    Ok(min_eigenvalue(m, tol)? >= -tol)
}

/// Smallest eigenvalue of a symmetric matrix; errors when `‖M − Mᵀ‖_max > tol`.
pub fn min_eigenvalue(m: &DMatrix<f64>, tol: f64) -> Result<f64, SparseError> {
    if m.nrows() != m.ncols() {
        return Err(SparseError::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let asym = (m - m.transpose()).amax();
    if asym > tol {
        return Err(SparseError::NotSymmetric { asymmetry: asym });
    }
    let sym = (m + m.transpose()) * 0.5;
    // Zero rows carry exact zero eigenvalues; dropping them keeps the
    // iteration away from degenerate shifts.
    let live: Vec<usize> = (0..sym.nrows()).filter(|&i| sym.row(i).iter().any(|v| *v != 0.0)).collect();
    let floor = if live.len() < sym.nrows() { 0.0 } else { f64::INFINITY };
    if live.is_empty() {
        return Ok(0.0);
    }
    let reduced = sym.select_rows(&live).select_columns(&live);
    let eig = reduced.symmetric_eigenvalues();
    if eig.iter().any(|v| v.is_nan()) {
        return Err(SparseError::EigenFailure);
    }
    Ok(eig.min().min(floor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rows_count_as_zero_eigenvalues() {
        let mut m = DMatrix::zeros(4, 4);
        m[(1, 1)] = 2.0;
        m[(3, 3)] = 5.0;
        m[(1, 3)] = 1.0;
        m[(3, 1)] = 1.0;
        assert_eq!(min_eigenvalue(&m, 1e-12).unwrap(), 0.0);
        m[(0, 0)] = 2.5;
        m[(2, 2)] = 3.0;
        let expected = 3.5 - (2.25f64 + 1.0).sqrt();
        assert!((min_eigenvalue(&m, 1e-12).unwrap() - expected).abs() < 1e-12);
        assert_eq!(min_eigenvalue(&DMatrix::zeros(3, 3), 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn assembly_sums_duplicates_and_mirrors() {
        let mut a = SparseSymmetric::new(3);
        a.add(0, 0, 1.0);
        a.add(0, 0, 2.0);
        a.add(2, 1, -1.0);
        let d = a.to_dense();
        assert_eq!(d[(0, 0)], 3.0);
        assert_eq!(d[(1, 2)], -1.0);
        assert_eq!(d[(2, 1)], -1.0);
        let (cp, ri, v) = a.to_upper_csc();
        assert_eq!(cp, vec![0, 1, 1, 2]);
        assert_eq!(ri, vec![0, 1]);
        assert_eq!(v, vec![3.0, -1.0]);
    }

    #[test]
    fn psd_examples() {
        assert!(is_psd(&DMatrix::zeros(3, 3), 1e-12).unwrap());
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1e-3]));
        assert!(!is_psd(&m, 1e-9).unwrap());
        let b = DMatrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        assert!(is_psd(&(b.transpose() * &b), 1e-9).unwrap());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(is_psd(&asym, 1e-9), Err(SparseError::NotSymmetric { .. })));
    }

    #[test]
    fn invalid_factor_rejected() {
        // Diagonal missing in column 1.
        let r = SparseLowerTriangular::from_parts(2, vec![0, 1, 2], vec![0, 0], vec![1.0, 1.0], vec![0, 1]);
        assert!(r.is_err());
        let r = SparseLowerTriangular::from_parts(2, vec![0, 1, 2], vec![0, 1], vec![1.0, -1.0], vec![0, 1]);
        assert!(r.is_err());
        let r = SparseLowerTriangular::from_parts(2, vec![0, 1, 2], vec![0, 1], vec![1.0, 1.0], vec![0, 0]);
        assert!(r.is_err());
    }
}
