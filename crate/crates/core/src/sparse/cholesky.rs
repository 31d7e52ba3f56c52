//! Up-looking sparse Cholesky with an elimination-tree symbolic pass.

use super::{approximate_minimum_degree, Ordering, SparseError, SparseLowerTriangular, SparseSymmetric};

/// Relative pivot tolerance: a pivot at or below `PIVOT_TOL * max|diag(A)|`
/// is reported as a positive-definiteness failure.
const PIVOT_TOL: f64 = 1e-12;

/// Factors `P A Pᵀ = G Gᵀ`.
pub fn cholesky(a: &SparseSymmetric, ordering: Ordering) -> Result<SparseLowerTriangular, SparseError> {
    let n = a.dim();
    if n == 0 {
        return Err(SparseError::InvalidFactor("cannot factor an empty matrix".into()));
    }
    let perm: Vec<usize> = match ordering {
        Ordering::Natural => (0..n).collect(),
        Ordering::FillReducing => approximate_minimum_degree(&a.adjacency()),
    };
    let mut pinv = vec![0usize; n];
    for (k, &p) in perm.iter().enumerate() {
        pinv[p] = k;
    }

    let (ap, ai, ax) = a.to_upper_csc();
    let max_diag = (0..n)
        .filter_map(|j| (ap[j]..ap[j + 1]).find(|&p| ai[p] == j).map(|p| ax[p].abs()))
        .fold(0.0f64, f64::max);
    let (cp, ci, cx) = symmetric_permute(n, &ap, &ai, &ax, &pinv);

    let parent = etree(n, &cp, &ci);
    let counts = column_counts(n, &cp, &ci, &parent);

    let mut lp = vec![0usize; n + 1];
    for j in 0..n {
        lp[j + 1] = lp[j] + counts[j];
    }
    let nnz = lp[n];
    let mut li = vec![0usize; nnz];
    let mut lx = vec![0.0f64; nnz];
    let mut next = lp[..n].to_vec();

    let mut x = vec![0.0f64; n];
    let mut stack = vec![0usize; n];
    let mut flag = vec![usize::MAX; n];

    for k in 0..n {
        let top = ereach(n, &cp, &ci, k, &parent, &mut stack, &mut flag);
        for p in cp[k]..cp[k + 1] {
            if ci[p] <= k {
                x[ci[p]] += cx[p];
            }
        }
        let mut d = x[k];
        x[k] = 0.0;
        for &i in &stack[top..n] {
            let lki = x[i] / lx[lp[i]];
            x[i] = 0.0;
            for p in lp[i] + 1..next[i] {
                x[li[p]] -= lx[p] * lki;
            }
            d -= lki * lki;
            let p = next[i];
            next[i] += 1;
            li[p] = k;
            lx[p] = lki;
        }
        if !(d > PIVOT_TOL * max_diag) {
            return Err(SparseError::NotPositiveDefinite { column: perm[k] });
        }
        let p = next[k];
        next[k] += 1;
        li[p] = k;
        lx[p] = d.sqrt();
    }
    debug_assert!((0..n).all(|j| next[j] == lp[j + 1]));

    SparseLowerTriangular::from_parts(n, lp, li, lx, perm)
}

/// Upper triangle of `P A Pᵀ` from the upper triangle of `A`.
fn symmetric_permute(
    n: usize,
    ap: &[usize],
    ai: &[usize],
    ax: &[f64],
    pinv: &[usize],
) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut count = vec![0usize; n];
    for j in 0..n {
        for p in ap[j]..ap[j + 1] {
            let (i2, j2) = (pinv[ai[p]], pinv[j]);
            count[i2.max(j2)] += 1;
        }
    }
    let mut cp = vec![0usize; n + 1];
    for j in 0..n {
        cp[j + 1] = cp[j] + count[j];
    }
    let mut fill = cp[..n].to_vec();
    let mut ci = vec![0usize; cp[n]];
    let mut cx = vec![0.0; cp[n]];
    for j in 0..n {
        for p in ap[j]..ap[j + 1] {
            let (i2, j2) = (pinv[ai[p]], pinv[j]);
            let col = i2.max(j2);
            let q = fill[col];
            fill[col] += 1;
            ci[q] = i2.min(j2);
            cx[q] = ax[p];
        }
    }
    (cp, ci, cx)
}

/// Elimination tree of a symmetric matrix given its upper-triangle CSC.
fn etree(n: usize, cp: &[usize], ci: &[usize]) -> Vec<usize> {
    let mut parent = vec![usize::MAX; n];
    let mut ancestor = vec![usize::MAX; n];
    for k in 0..n {
        for p in cp[k]..cp[k + 1] {
            let mut i = ci[p];
            while i != usize::MAX && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == usize::MAX {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal) in topological
/// order, returned as `stack[top..n]`.
fn ereach(
    n: usize,
    cp: &[usize],
    ci: &[usize],
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    flag: &mut [usize],
) -> usize {
    let mut top = n;
    flag[k] = k;
    let mut path = Vec::new();
    for p in cp[k]..cp[k + 1] {
        let mut i = ci[p];
        if i > k {
            continue;
        }
        path.clear();
        while flag[i] != k {
            path.push(i);
            flag[i] = k;
            i = parent[i];
        }
        while let Some(v) = path.pop() {
            top -= 1;
            stack[top] = v;
        }
    }
    top
}

/// Exact column counts of `L` (diagonal included) by walking row patterns.
fn column_counts(n: usize, cp: &[usize], ci: &[usize], parent: &[usize]) -> Vec<usize> {
    let mut counts = vec![1usize; n];
    let mut stack = vec![0usize; n];
    let mut flag = vec![usize::MAX; n];
    for k in 0..n {
        let top = ereach(n, cp, ci, k, parent, &mut stack, &mut flag);
        for &i in &stack[top..n] {
            counts[i] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dense_cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            l[(j, j)] = d.sqrt();
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / l[(j, j)];
            }
        }
        l
    }

    #[test]
    fn identity_factor() {
        let mut a = SparseSymmetric::new(3);
        for i in 0..3 {
            a.add(i, i, 1.0);
        }
        let g = cholesky(&a, Ordering::Natural).unwrap();
        assert_eq!(g.nnz(), 3);
        assert_eq!(g.to_dense(), DMatrix::identity(3, 3));
    }

    #[test]
    fn two_by_two_hand_case() {
        let mut a = SparseSymmetric::new(2);
        a.add(0, 0, 4.0);
        a.add(0, 1, 2.0);
        a.add(1, 1, 3.0);
        let g = cholesky(&a, Ordering::Natural).unwrap();
        let d = g.to_dense();
        assert!((d[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((d[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((d[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d[(0, 1)], 0.0);
    }

    #[test]
    fn tridiagonal_natural_is_bidiagonal() {
        let n = 50;
        let mut a = SparseSymmetric::new(n);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            a.add(i, i, 2.0);
            dense[(i, i)] = 2.0;
            if i + 1 < n {
                a.add(i, i + 1, -1.0);
                dense[(i, i + 1)] = -1.0;
                dense[(i + 1, i)] = -1.0;
            }
        }
        let oracle = dense_cholesky(&dense);
        let oracle_nnz = oracle.iter().filter(|v| v.abs() > 1e-14).count();
        assert_eq!(oracle_nnz, 99);
        let g = cholesky(&a, Ordering::Natural).unwrap();
        assert_eq!(g.nnz(), oracle_nnz);
        assert!((g.to_dense() - oracle).amax() < 1e-12);
    }

    #[test]
    fn indefinite_reports_column() {
        let mut a = SparseSymmetric::new(2);
        a.add(0, 0, 1.0);
        a.add(0, 1, 2.0);
        a.add(1, 1, 1.0);
        match cholesky(&a, Ordering::Natural) {
            Err(SparseError::NotPositiveDefinite { column }) => assert_eq!(column, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
