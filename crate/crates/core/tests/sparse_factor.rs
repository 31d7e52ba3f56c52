use cskf::sparse::{cholesky, is_psd, Ordering, SparseError, SparseSymmetric};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random sparse SPD matrix: sparse `B` with `A = BᵀB + δI`.
fn random_spd(n: usize, density: f64, seed: u64) -> (SparseSymmetric, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = DMatrix::zeros(n + 5, n);
    for i in 0..n + 5 {
        for j in 0..n {
            if i == j || rng.random::<f64>() < density {
                b[(i, j)] = rng.random_range(-1.0..1.0);
            }
        }
    }
    let a = b.transpose() * b + DMatrix::identity(n, n) * 0.1;
    (SparseSymmetric::from_dense(&a), a)
}

fn dense_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().lu().solve(b).expect("nonsingular")
}

#[test]
fn hand_back_solve_and_forward_solve() {
    let mut a = SparseSymmetric::new(2);
    a.add(0, 0, 4.0);
    a.add(0, 1, 2.0);
    a.add(1, 1, 3.0);
    let g = cholesky(&a, Ordering::Natural).unwrap();
    let jt = g.back_solve_transposed(&DMatrix::from_column_slice(2, 1, &[4.0, 2.0])).unwrap();
    assert!((jt[(0, 0)] - 2.0).abs() < 1e-15);
    assert!(jt[(1, 0)].abs() < 1e-15);

    // Gᵀ x = [0, 1]ᵀ with G = [[2, 0], [1, √2]]: oracle via dense LU.
    let gd = g.to_dense();
    let oracle = dense_solve(&gd.transpose(), &DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
    let x = g.forward_solve(&DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
    assert!((&x - &oracle).amax() < 1e-15);
    assert!((x[(0, 0)] + 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-15);
}

#[test]
fn identity_factor_solves_are_identity() {
    let mut a = SparseSymmetric::new(4);
    for i in 0..4 {
        a.add(i, i, 1.0);
    }
    let g = cholesky(&a, Ordering::FillReducing).unwrap();
    let b = DMatrix::from_fn(4, 3, |i, j| (i as f64) - 2.0 * j as f64);
    assert_eq!(g.back_solve_transposed(&b).unwrap(), b);
    assert_eq!(g.forward_solve(&b).unwrap(), b);
}

#[test]
fn dimension_mismatch_is_reported() {
    let (a, _) = random_spd(5, 0.3, 1);
    let g = cholesky(&a, Ordering::Natural).unwrap();
    let b = DMatrix::zeros(4, 1);
    assert!(matches!(g.back_solve_transposed(&b), Err(SparseError::DimensionMismatch { expected: 5, found: 4 })));
    assert!(matches!(g.forward_solve(&b), Err(SparseError::DimensionMismatch { .. })));
}

#[test]
fn random_dim40_matches_dense_lu() {
    let (a, dense) = random_spd(40, 0.08, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = DMatrix::from_fn(40, 2, |_, _| rng.random_range(-1.0..1.0));
    for ordering in [Ordering::Natural, Ordering::FillReducing] {
        let g = cholesky(&a, ordering).unwrap();
        // Whitened solve: G Jᵀ = P B, checked through the dense factor.
        let jt = g.back_solve_transposed(&b).unwrap();
        let mut pb = DMatrix::zeros(40, 2);
        for k in 0..40 {
            pb.set_row(k, &b.row(g.perm()[k]));
        }
        let oracle = dense_solve(&g.to_dense(), &pb);
        assert!((&jt - &oracle).amax() <= 1e-9 * oracle.amax().max(1.0));
        // Full solve A x = b through both triangular solves.
        let x = g.forward_solve(&jt).unwrap();
        let x_oracle = dense_solve(&dense, &b);
        assert!((&x - &x_oracle).amax() <= 1e-9 * x_oracle.amax().max(1.0));
    }
}

#[test]
fn fill_reducing_beats_natural_on_arrow() {
    // Dense first row/column: natural order fills completely, AMD does not.
    let n = 60;
    let mut a = SparseSymmetric::new(n);
    for i in 0..n {
        a.add(i, i, n as f64);
        if i > 0 {
            a.add(0, i, 1.0);
        }
    }
    let nat = cholesky(&a, Ordering::Natural).unwrap();
    let amd = cholesky(&a, Ordering::FillReducing).unwrap();
    assert_eq!(nat.nnz(), n * (n + 1) / 2);
    assert_eq!(amd.nnz(), 2 * n - 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn factor_reconstructs_matrix(n in 1usize..200, density in 0.0f64..0.05, seed in any::<u64>()) {
        let (a, dense) = random_spd(n, density, seed);
        let scale = dense.amax();
        for ordering in [Ordering::Natural, Ordering::FillReducing] {
            let g = cholesky(&a, ordering).unwrap();
            g.validate().unwrap();
            let err = (g.reconstruct() - &dense).amax();
            prop_assert!(err <= 1e-10 * scale, "reconstruction error {err:e} (scale {scale})");
        }
    }

    #[test]
    fn solves_are_ordering_invariant(n in 2usize..120, density in 0.0f64..0.08, seed in any::<u64>()) {
        let (a, _) = random_spd(n, density, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let b = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let g_nat = cholesky(&a, Ordering::Natural).unwrap();
        let g_amd = cholesky(&a, Ordering::FillReducing).unwrap();
        let x_nat = g_nat.forward_solve(&g_nat.back_solve_transposed(&b).unwrap()).unwrap();
        let x_amd = g_amd.forward_solve(&g_amd.back_solve_transposed(&b).unwrap()).unwrap();
        prop_assert!((&x_nat - &x_amd).amax() <= 1e-9 * x_nat.amax().max(1.0));
        // Whitened Gram matrices agree even though the factor coordinates differ.
        let jn = g_nat.back_solve_transposed(&b).unwrap();
        let ja = g_amd.back_solve_transposed(&b).unwrap();
        let gram_n = jn.transpose() * &jn;
        let gram_a = ja.transpose() * &ja;
        prop_assert!((&gram_n - &gram_a).amax() <= 1e-9 * gram_n.amax().max(1.0));
    }

    #[test]
    fn back_solve_residual_is_small(n in 1usize..150, seed in any::<u64>()) {
        let (a, _) = random_spd(n, 0.04, seed);
        let g = cholesky(&a, Ordering::FillReducing).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let b = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-10.0..10.0));
        let jt = g.back_solve_transposed(&b).unwrap();
        let mut pb = DMatrix::zeros(n, 3);
        for k in 0..n {
            pb.set_row(k, &b.row(g.perm()[k]));
        }
        let resid = (g.to_dense() * jt - pb).amax();
        prop_assert!(resid <= 1e-9 * b.amax());
    }

    #[test]
    fn gram_matrices_are_psd(rows in 1usize..30, cols in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        prop_assert!(is_psd(&(b.transpose() * b), 1e-9).unwrap());
    }
}
