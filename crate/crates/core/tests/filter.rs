use cskf::bench::verify::{
    consistency_ordering_trial, local_jacobian_fd, mapped_jacobian_fd, oracle_equivalence_trial, random_map_hessian,
    random_map_jacobian, transition_fd, whitened_jacobian_check, OracleScenario,
};
use cskf::filter::{dense_ekf_update, dense_skf_update, FilterBelief, EVOLVING_DIM};
use cskf::sparse::{cholesky, is_psd, Ordering};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn factorized_operations_match_dense_joint() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..12 {
        let submaps = 1 + trial % 3;
        let t = oracle_equivalence_trial(&mut rng, submaps, 200);
        assert!(t.max() < 1e-8, "trial {trial}: {t:?}");
    }
}

#[test]
fn scalar_schmidt_example() {
    let p = dmatrix![1.0, 0.5; 0.5, 1.0];
    let h = dmatrix![1.0, 1.0];
    let r = dmatrix![1.0];
    let mut ps = p.clone();
    let mut x = DVector::zeros(2);
    let up = dense_skf_update(&mut x, &mut ps, &h, &dvector![0.0], &r, 1).unwrap();
    assert!((up.innovation[(0, 0)] - 4.0).abs() < 1e-15);
    let kbar = &p * h.transpose();
    assert_eq!(kbar, dmatrix![1.5; 1.5]);
    let expected = &p - dmatrix![0.5625, 0.5625; 0.5625, 0.0];
    assert!((&ps - expected).amax() < 1e-14, "{ps}");
    let mut pe = p.clone();
    dense_ekf_update(&mut x, &mut pe, &h, &dvector![0.0], &r).unwrap();
    assert!(is_psd(&(&ps - &pe), 1e-12).unwrap());
    // Difference equals the withheld map-gain outer product.
    let km = 1.5 / 4.0;
    assert!(((&ps - &pe)[(1, 1)] - km * km * 4.0).abs() < 1e-14);
}

#[test]
fn ekf_never_looser_than_skf() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        assert!(consistency_ordering_trial(&mut rng) >= -1e-9);
    }
}

#[test]
fn joseph_matches_standard_form_and_zero_jacobian_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sc = OracleScenario::generate(&mut rng, 1, 60);
    let p = sc.belief.p_rr.clone();
    let n = p.nrows();
    let h = DMatrix::from_fn(4, n, |i, j| ((i * 31 + j * 7) % 11) as f64 * 0.1 - 0.5);
    let r = DMatrix::identity(4, 4) * 0.3;
    let mut pj = p.clone();
    let mut x = DVector::zeros(n);
    let up = dense_ekf_update(&mut x, &mut pj, &h, &DVector::zeros(4), &r).unwrap();
    let standard = (DMatrix::identity(n, n) - &up.gain * &h) * &p;
    assert!((pj - standard).amax() < 1e-12);
    let mut pz = p.clone();
    dense_ekf_update(&mut x, &mut pz, &DMatrix::zeros(4, n), &DVector::from_element(4, 1.0), &r).unwrap();
    assert!((pz - &p).amax() == 0.0);
}

#[test]
fn zero_device_jacobian_without_correlation_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = random_map_hessian(&mut rng, 3, 8);
    let g = cholesky(&h, Ordering::FillReducing).unwrap();
    let mut b = FilterBelief::new(DMatrix::identity(EVOLVING_DIM, EVOLVING_DIM), 1);
    b.gamma[0] = Some(DMatrix::zeros(EVOLVING_DIM, g.dim()));
    let before = b.clone();
    let hm = random_map_jacobian(&mut rng, 4, 3, 8);
    let dx = b.map_update(0, &g, &DMatrix::zeros(4, EVOLVING_DIM), &hm, &DVector::from_element(4, 2.0), 1.0).unwrap();
    assert_eq!(dx, DVector::zeros(EVOLVING_DIM));
    assert_eq!(b.p_rr, before.p_rr);
    assert_eq!(b.gamma, before.gamma);
}

#[test]
fn single_submap_update_is_bitwise_the_same_with_extra_empty_submaps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sc = OracleScenario::generate(&mut rng, 2, 120);
    let d = sc.device_dim();
    let (np, nf) = sc.layouts[0];
    let h_r = DMatrix::from_fn(6, d, |i, j| ((i + 3 * j) % 5) as f64 - 2.0);
    let h_m = random_map_jacobian(&mut rng, 6, np, nf);
    let r = DVector::from_element(6, 0.3);
    let mut single = sc.belief.clone();
    single.gamma.truncate(1);
    let mut multi = sc.belief.clone();
    let a = single.map_update(0, &sc.factors[0], &h_r, &h_m, &r, 1.0).unwrap();
    let b = multi.map_update(0, &sc.factors[0], &h_r, &h_m, &r, 1.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(single.p_rr, multi.p_rr);
    assert_eq!(single.gamma[0], multi.gamma[0]);
    assert!(multi.gamma[1].is_none());
}

#[test]
fn uncorrelated_map_reduces_to_plain_msckf_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sc = OracleScenario::generate(&mut rng, 1, 60);
    let mut with_map = sc.belief.clone();
    let mut plain = FilterBelief::new(DMatrix::identity(EVOLVING_DIM, EVOLVING_DIM), 0);
    plain.p_rr = sc.belief.p_rr.clone();
    let d = sc.device_dim();
    let h = DMatrix::from_fn(5, d, |i, j| ((2 * i + j) % 7) as f64 * 0.2 - 0.6);
    let r = DVector::from_fn(5, |i, _| i as f64 * 0.1);
    let a = with_map.local_update(&h, &r, 0.8).unwrap();
    let b = plain.local_update(&h, &r, 0.8).unwrap();
    assert_eq!(a, b);
    assert_eq!(with_map.p_rr, plain.p_rr);
}

#[test]
fn clone_then_marginalize_restores_belief() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sc = OracleScenario::generate(&mut rng, 2, 120);
    let mut b = sc.belief.clone();
    let d = b.dim();
    b.augment_clone();
    let p = &b.p_rr;
    assert_eq!(p.view((d, d), (6, 6)), p.view((0, 0), (6, 6)));
    b.remove_block(d, 6);
    assert_eq!(b.p_rr, sc.belief.p_rr);
    assert_eq!(b.gamma, sc.belief.gamma);
}

#[test]
fn inflated_noise_limit_leaves_state_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sc = OracleScenario::generate(&mut rng, 1, 60);
    let mut b = sc.belief.clone();
    let d = b.dim();
    let h = DMatrix::from_fn(4, d, |i, j| ((i + j) % 3) as f64);
    let dx = b.local_update(&h, &DVector::from_element(4, 1.0), 1e9).unwrap();
    assert!(dx.amax() < 1e-15);
    assert!((&b.p_rr - &sc.belief.p_rr).amax() < 1e-14);
}

#[test]
fn whitened_jacobian_reproduces_map_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert!(whitened_jacobian_check(&mut rng) < 1e-10);
}

#[test]
fn analytic_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    assert!(local_jacobian_fd(&mut rng, 25) < 1e-5);
    assert!(mapped_jacobian_fd(&mut rng, 25) < 1e-5);
    assert!(transition_fd(&mut rng, 5) < 1e-5);
}
