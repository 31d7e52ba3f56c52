use cskf::geom::{CameraModel, MapTransform4DoF};
use cskf::mapper::{
    build_map_bls, build_submaps, export_bundle, import_bundle, partition_submaps, read_bundle, solve_cm_constrained,
    solve_cm_with, covariance_bound_check, write_bundle, BundleError, MapBundle, MapperConfig, MapperError, QpMethod,
    SubmapPartition,
};
use cskf::sim::{generate_session, MappingData, MappingNoise, NoiseConfig, TrajectorySpec, WorldFeatures, WorldSpec};
use cskf::sparse::{cholesky, Ordering};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mapping_data(duration: f64, landmarks: usize, noise_free: bool, seed: u64) -> (MappingData, WorldFeatures) {
    let spec = TrajectorySpec::room(duration, 1);
    let world = WorldFeatures::generate(&WorldSpec::room(landmarks, 0), seed).unwrap();
    let noise = if noise_free { NoiseConfig::noise_free() } else { NoiseConfig::default() };
    let s = generate_session(&spec, &world, &CameraModel::default(), &noise, seed).unwrap();
    let mn = if noise_free { MappingNoise::noise_free() } else { MappingNoise::default() };
    (MappingData::from_session(&s, &world, noise.pixel_sigma, &mn, 4, seed + 1).unwrap(), world)
}

#[test]
fn noise_free_map_recovers_truth() {
    let (d, world) = mapping_data(8.0, 60, true, 1);
    let sol = build_map_bls(&d, &MapperConfig::default()).unwrap();
    assert!(sol.gradient_norm < 1e-6);
    for (j, f) in sol.estimate.features.iter().enumerate() {
        let err = (sol.estimate.feature_in_map(j) - world.get(f.id).unwrap().position).norm();
        assert!(err < 1e-6, "feature {} off by {err}", f.id);
    }
    for (est, truth) in sol.estimate.poses.iter().zip(&d.truth_poses) {
        assert!((est.p - truth.p).norm() < 1e-6);
    }
}

#[test]
fn noisy_map_reprojection_and_factor() {
    let (d, _) = mapping_data(8.0, 60, false, 2);
    let sol = build_map_bls(&d, &MapperConfig::default()).unwrap();
    assert!(sol.reprojection_rms <= 1.1 * d.pixel_sigma, "rms {}", sol.reprojection_rms);
    assert!(sol.reprojection_rms > 0.5 * d.pixel_sigma);
    let h = sol.hessian.to_dense();
    let g = sol.factor.reconstruct();
    assert!((&h - &g).amax() <= 1e-9 * h.amax());
}

#[test]
fn fill_reducing_not_worse_than_natural() {
    for seed in [3, 4] {
        let (d, _) = mapping_data(10.0, 80, false, seed);
        let sol = build_map_bls(&d, &MapperConfig::default()).unwrap();
        let nat = cholesky(&sol.hessian, Ordering::Natural).unwrap();
        let amd = cholesky(&sol.hessian, Ordering::FillReducing).unwrap();
        assert!(amd.nnz() <= nat.nnz(), "amd {} natural {}", amd.nnz(), nat.nnz());
    }
}

#[test]
fn partition_classifies_features() {
    let (d, _) = mapping_data(10.0, 80, true, 5);
    let part = partition_submaps(&d, 2).unwrap();
    let n = d.truth_poses.len();
    assert_eq!(part.ranges[0].len() + part.ranges[1].len(), n);
    let seen_in = |range: std::ops::Range<usize>, id: u32| {
        d.observations[range].iter().filter(|o| o.iter().any(|(i, _)| *i == id)).count()
    };
    for id in part.common(0, 1) {
        assert!(seen_in(part.ranges[0].clone(), id) >= 2 && seen_in(part.ranges[1].clone(), id) >= 2);
    }
    for id in &part.features[0] {
        if !part.features[1].contains(id) {
            assert!(seen_in(part.ranges[1].clone(), *id) < 2);
        }
    }
}

#[test]
fn cm_with_disjoint_features_equals_independent_solves() {
    let (d, _) = mapping_data(10.0, 80, false, 6);
    let n = d.truth_poses.len();
    // Strip observations so no landmark survives in both halves.
    let mut disjoint = d.clone();
    let part = partition_submaps(&d, 2).unwrap();
    for k in part.ranges[1].clone() {
        disjoint.observations[k].retain(|(id, _)| !part.features[0].contains(id));
    }
    let split = SubmapPartition { ranges: vec![0..n / 2, n / 2..n], features: Vec::new() };
    let cm = solve_cm_constrained(&disjoint, &split, &MapperConfig::default()).unwrap();
    assert!(cm.common.is_empty());
    let mut first = disjoint.clone();
    first.truth_poses.truncate(n / 2);
    first.observations.truncate(n / 2);
    first.odometry.truncate(n / 2 - 1);
    first.tilt.truncate(n / 2);
    let alone = build_map_bls(&first, &MapperConfig::default()).unwrap();
    assert_eq!(alone.estimate, cm.estimates[0]);
}

#[test]
fn cm_noise_free_duplicates_coincide() {
    let (d, _) = mapping_data(10.0, 80, true, 7);
    let part = partition_submaps(&d, 2).unwrap();
    let cm = solve_cm_constrained(&d, &part, &MapperConfig::default()).unwrap();
    assert!(cm.common.len() >= 2);
    assert!(cm.constraint_violation <= 1e-8);
    for id in &cm.common {
        let ja = cm.estimates[0].features.iter().position(|f| f.id == *id).unwrap();
        let jb = cm.estimates[1].features.iter().position(|f| f.id == *id).unwrap();
        let xa = cm.estimates[0].feature_in_map(ja);
        let xb = cm.transform.apply(&cm.estimates[1].feature_in_map(jb));
        assert!((xa - xb).norm() < 1e-8);
    }
}

/// Desk-scale problem: range-space KKT steps and the dense null-space
/// projection converge to the same constrained optimum.
#[test]
fn cm_matches_dense_nullspace_oracle() {
    let (d, _) = mapping_data(6.0, 40, false, 8);
    assert!(d.truth_poses.len() <= 30);
    let part = partition_submaps(&d, 2).unwrap();
    let cfg = MapperConfig::default();
    let fast = solve_cm_with(&d, &part, &cfg, QpMethod::RangeSpace).unwrap();
    let dense = solve_cm_with(&d, &part, &cfg, QpMethod::DenseNullSpace).unwrap();
    assert!(fast.constraint_violation <= 1e-8 && dense.constraint_violation <= 1e-8);
    for s in 0..2 {
        for (a, b) in fast.estimates[s].features.iter().zip(&dense.estimates[s].features) {
            assert!((a.position - b.position).norm() < 1e-6);
        }
        for (a, b) in fast.estimates[s].poses.iter().zip(&dense.estimates[s].poses) {
            assert!((a.p - b.p).norm() < 1e-6 && a.q.angle_to(&b.q) < 1e-6);
        }
    }
    assert!((fast.transform.yaw - dense.transform.yaw).abs() < 1e-6);
}

#[test]
fn recursive_submaps_cover_all_poses() {
    let (d, _) = mapping_data(12.0, 80, false, 9);
    let subs = build_submaps(&d, 3, &MapperConfig::default()).unwrap();
    assert_eq!(subs.len(), 3);
    assert_eq!(subs[0].range.start, 0);
    for w in subs.windows(2) {
        assert_eq!(w[0].range.end, w[1].range.start);
    }
    assert_eq!(subs[2].range.end, d.truth_poses.len());
    for s in &subs {
        assert_eq!(s.factor.dim(), s.estimate.dim());
    }
}

fn bundle() -> MapBundle {
    let (d, _) = mapping_data(8.0, 60, false, 10);
    let subs = build_submaps(&d, 2, &MapperConfig::default()).unwrap();
    MapBundle::from_submaps(subs, d.camera, d.pixel_sigma)
}

#[test]
fn bundle_round_trip_is_bit_identical() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.cskb");
    export_bundle(&path, &b).unwrap();
    let back = import_bundle(&path).unwrap();
    assert_eq!(back, b);
    let bytes = std::fs::read(&path).unwrap();
    let mut again = Vec::new();
    write_bundle(&mut again, &back).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn bundle_rejects_corruption() {
    let b = bundle();
    let mut bytes = Vec::new();
    write_bundle(&mut bytes, &b).unwrap();
    let cut = &bytes[..bytes.len() / 2];
    assert!(matches!(read_bundle(&mut &cut[..]), Err(BundleError::ChecksumMismatch { .. } | BundleError::Format(_))));
    assert!(matches!(read_bundle(&mut &bytes[..10]), Err(BundleError::Format(_))));
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(matches!(read_bundle(&mut &flipped[..]), Err(BundleError::ChecksumMismatch { .. })));
    let mut versioned = bytes.clone();
    versioned[4] = 9;
    assert!(matches!(read_bundle(&mut &versioned[..]), Err(BundleError::VersionMismatch { found: 9, .. })));
}

#[test]
fn bundle_with_mismatched_factor_rejected() {
    let mut b = bundle();
    b.submaps[0].factor = b.submaps[1].factor.clone();
    assert_ne!(b.submaps[0].factor.dim(), b.submaps[0].dim());
    let mut bytes = Vec::new();
    assert!(matches!(write_bundle(&mut bytes, &b), Err(BundleError::Invalid(_))));
    b.submaps[0].factor = bundle().submaps[0].factor.clone();
    b.submaps[0].features[0].anchor = 10_000;
    assert!(matches!(write_bundle(&mut bytes, &b), Err(BundleError::Invalid(_))));
}

#[test]
fn too_few_poses_rejected() {
    let (mut d, _) = mapping_data(8.0, 60, true, 11);
    d.truth_poses.truncate(1);
    d.observations.truncate(1);
    d.odometry.clear();
    d.tilt.truncate(1);
    assert!(matches!(build_map_bls(&d, &MapperConfig::default()), Err(MapperError::TooFewPoses(_))));
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n + 3, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Random constrained problems: dense KKT covariance against the relaxed
/// block-diagonal covariance.
#[test]
fn relaxed_covariance_dominates_constrained() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let (n1, n2) = (rng.random_range(6..30), rng.random_range(6..30));
        let m = 3 * rng.random_range(2..4);
        let h1 = random_spd(&mut rng, n1);
        let h2 = random_spd(&mut rng, n2);
        let a1 = DMatrix::from_fn(m, n1, |_, _| rng.random_range(-1.0..1.0));
        let a2 = DMatrix::from_fn(m, n2, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(m, 4, |_, _| rng.random_range(-1.0..1.0));
        let rep = covariance_bound_check(&h1, &h2, &a1, &a2, &b, 1e-8, false).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.lemma_residual < 1e-8, "{rep:?}");
        let bad = covariance_bound_check(&h1, &h2, &a1, &a2, &b, 1e-8, true).unwrap();
        assert!(!bad.difference_psd && bad.min_eig_difference < -1e-8, "{bad:?}");
    }
}

#[test]
fn gauge_transform_near_identity() {
    let (d, _) = mapping_data(10.0, 80, false, 12);
    let part = partition_submaps(&d, 2).unwrap();
    let cm = solve_cm_constrained(&d, &part, &MapperConfig::default()).unwrap();
    let t: MapTransform4DoF = cm.transform;
    assert!(t.yaw.abs() < 0.05 && t.translation.norm() < 0.2, "{t:?}");
}

#[test]
fn long_drifting_corridors_converge() {
    for seed in [900, 901] {
        let b = cskf::bench::corridor_map(1000, 1, seed).unwrap();
        assert!(b.total_dim() > 900, "seed {seed}: dim {}", b.total_dim());
    }
}
