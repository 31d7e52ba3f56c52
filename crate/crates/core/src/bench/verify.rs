//! Property battery shared by the integration tests, the acceptance target
//! and the `verify` subcommand.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::filter::{
    dense_ekf_update, dense_skf_update, propagate_nominal, whitened_map_jacobian, DeviceState, DenseJoint, FilterBelief,
    ImuNoise, Mat15, CLONE_DIM, EVOLVING_DIM, TRANSFORM_DIM,
};
use crate::geom::{exp_so3, local_feature_jacobians, mapped_feature_jacobians, perturb, CameraModel, MapTransform4DoF, Pose, Vec3};
use crate::mapper::{solve_cm_constrained, covariance_bound_check, MapperConfig, CovarianceBoundReport};
use crate::sim::{generate_session, ImuSample, MappingData, MappingNoise, NoiseConfig, TrajectorySpec, TruthState, WorldFeatures, WorldSpec};
use crate::sparse::{cholesky, min_eigenvalue, Ordering, SparseLowerTriangular, SparseSymmetric};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * gauss(rng))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n + 2, 1.0 / (n as f64).sqrt());
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

/// Sparse SPD Hessian shaped like a small map: pose blocks of 6 coupled to
/// feature blocks of 3 through random "observations".
pub fn random_map_hessian(rng: &mut ChaCha8Rng, poses: usize, features: usize) -> SparseSymmetric {
    let n = 6 * poses + 3 * features;
    let mut h = SparseSymmetric::new(n);
    for i in 0..n {
        h.add(i, i, 0.5);
    }
    for j in 0..features {
        let span = 2 + rng.random_range(0..3usize);
        let first = rng.random_range(0..poses);
        for k in 0..span {
            let p = (first + k) % poses;
            let cols: Vec<usize> = (0..6).map(|c| 6 * p + c).chain((0..3).map(|c| 6 * poses + 3 * j + c)).collect();
            let a = random_matrix(rng, 2, 9, 1.0);
            let ata = a.transpose() * a;
            for (u, &cu) in cols.iter().enumerate() {
                for (v, &cv) in cols.iter().enumerate() {
                    if cu <= cv {
                        h.add(cu, cv, ata[(u, v)]);
                    }
                }
            }
        }
    }
    for p in 1..poses {
        for c in 0..6 {
            h.add(6 * (p - 1) + c, 6 * p + c, -0.2);
        }
    }
    h
}

/// Random measurement Jacobian touching one pose block and one feature per
/// two rows, like a mapped-feature observation.
pub fn random_map_jacobian(rng: &mut ChaCha8Rng, rows: usize, poses: usize, features: usize) -> DMatrix<f64> {
    let n = 6 * poses + 3 * features;
    let mut h = DMatrix::zeros(rows, n);
    for k in 0..rows / 2 {
        let p = rng.random_range(0..poses);
        let f = rng.random_range(0..features);
        for r in 0..2 {
            for c in 0..6 {
                h[(2 * k + r, 6 * p + c)] = gauss(rng);
            }
            for c in 0..3 {
                h[(2 * k + r, 6 * poses + 3 * f + c)] = gauss(rng);
            }
        }
    }
    h
}

/// A randomized factorized belief with consistent joint covariance.
pub struct OracleScenario {
    pub belief: FilterBelief,
    pub factors: Vec<SparseLowerTriangular>,
    /// Map layout `(poses, features)` of each sub-map.
    pub layouts: Vec<(usize, usize)>,
    pub transforms: usize,
    pub clones: usize,
}

impl OracleScenario {
    /// `submaps` sub-maps of total dim ≤ `max_map_dim`; all but the last are
    /// initialized (non-zero `Γ`).
    pub fn generate(rng: &mut ChaCha8Rng, submaps: usize, max_map_dim: usize) -> Self {
        let transforms = submaps - 1;
        let clones = rng.random_range(1..5usize);
        let d = EVOLVING_DIM + TRANSFORM_DIM * transforms + CLONE_DIM * clones;
        let mut layouts = Vec::new();
        let mut factors = Vec::new();
        let budget = max_map_dim / submaps;
        for _ in 0..submaps {
            let poses = rng.random_range(2..=(budget / 12).max(2));
            let features = rng.random_range(3..=((budget - 6 * poses) / 3).max(3));
            let h = random_map_hessian(rng, poses, features);
            factors.push(cholesky(&h, Ordering::FillReducing).expect("SPD by construction"));
            layouts.push((poses, features));
        }
        let mut gamma = Vec::new();
        let mut gg = DMatrix::zeros(d, d);
        for (i, f) in factors.iter().enumerate() {
            if i < transforms {
                let g = random_matrix(rng, d, f.dim(), 0.3 / (f.dim() as f64).sqrt());
                gg += &g * g.transpose();
                gamma.push(Some(g));
            } else {
                gamma.push(None);
            }
        }
        let p_rr = gg + random_spd(rng, d, 0.05);
        let mut belief = FilterBelief::new(DMatrix::identity(EVOLVING_DIM, EVOLVING_DIM), submaps);
        belief.p_rr = p_rr;
        belief.gamma = gamma;
        Self { belief, factors, layouts, transforms, clones }
    }

    pub fn dense(&self) -> DenseJoint {
        let refs: Vec<_> = self.factors.iter().collect();
        DenseJoint::from_belief(&self.belief, &refs)
    }

    pub fn device_dim(&self) -> usize {
        self.belief.dim()
    }
}

/// Largest absolute difference between the implied joint covariance of a
/// factorized belief and a dense joint covariance.
pub fn joint_discrepancy(belief: &FilterBelief, factors: &[SparseLowerTriangular], dense: &DenseJoint) -> f64 {
    let mut err = (&belief.p_rr - dense.device_block()).amax();
    for (i, f) in factors.iter().enumerate() {
        let cross = match &belief.gamma[i] {
            Some(g) => g * f.dense_whitener(),
            None => DMatrix::zeros(belief.dim(), f.dim()),
        };
        err = err.max((cross - dense.cross_block(i)).amax());
        err = err.max((f.dense_inverse() - dense.map_block(i)).amax());
    }
    err
}

/// Per-operation maxima of one oracle-equivalence trial.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleTrial {
    pub propagate: f64,
    pub clone: f64,
    pub local_update: f64,
    pub map_update: f64,
    pub initialize: f64,
    pub marginalize: f64,
    pub state_correction: f64,
}

impl OracleTrial {
    pub fn max(&self) -> f64 {
        [self.propagate, self.clone, self.local_update, self.map_update, self.initialize, self.marginalize, self.state_correction]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn random_phi(rng: &mut ChaCha8Rng) -> (Mat15, Mat15) {
    let phi = Mat15::identity() + Mat15::from_fn(|_, _| 0.05 * gauss(rng));
    let a = Mat15::from_fn(|_, _| 0.02 * gauss(rng));
    (phi, a * a.transpose())
}

/// Runs every factorized operation against the dense joint bookkeeping on
/// one random scenario.
pub fn oracle_equivalence_trial(rng: &mut ChaCha8Rng, submaps: usize, max_map_dim: usize) -> OracleTrial {
    let mut sc = OracleScenario::generate(rng, submaps.max(1) + 1, max_map_dim);
    let mut dense = sc.dense();
    let mut out = OracleTrial::default();
    let sigma = 0.7;

    let (phi, q) = random_phi(rng);
    sc.belief.propagate(&phi, &q);
    dense.propagate(&phi, &q);
    out.propagate = joint_discrepancy(&sc.belief, &sc.factors, &dense);

    sc.belief.augment_clone();
    dense.augment_clone();
    out.clone = joint_discrepancy(&sc.belief, &sc.factors, &dense);

    let d = sc.device_dim();
    let h = random_matrix(rng, 6, d, 1.0);
    let r = random_matrix(rng, 6, 1, 1.0).column(0).into_owned();
    let dx_f = sc.belief.local_update(&h, &r, sigma).expect("SPD innovation");
    let dx_d = dense.local_update(&h, &r, sigma).expect("SPD innovation");
    out.local_update = joint_discrepancy(&sc.belief, &sc.factors, &dense);
    out.state_correction = (dx_f - dx_d).amax();

    for i in 0..sc.transforms {
        let (np, nf) = sc.layouts[i];
        let rows = 2 * rng.random_range(2..6usize);
        let h_r = random_matrix(rng, rows, d, 1.0);
        let h_m = random_map_jacobian(rng, rows, np, nf);
        let r = random_matrix(rng, rows, 1, 1.0).column(0).into_owned();
        let dx_f = sc.belief.map_update(i, &sc.factors[i], &h_r, &h_m, &r, sigma).expect("SPD innovation");
        let dx_d = dense.map_update(i, &h_r, &h_m, &r, sigma).expect("SPD innovation");
        out.map_update = out.map_update.max(joint_discrepancy(&sc.belief, &sc.factors, &dense));
        out.state_correction = out.state_correction.max((dx_f - dx_d).amax());
    }

    let last = sc.factors.len() - 1;
    let (np, nf) = sc.layouts[last];
    let rows = 2 * rng.random_range(4..8usize);
    let h_r = random_matrix(rng, rows, d, 1.0);
    let h_tau = random_matrix(rng, rows, TRANSFORM_DIM, 1.0);
    let h_m = random_map_jacobian(rng, rows, np, nf);
    let r = random_matrix(rng, rows, 1, 1.0).column(0).into_owned();
    let insert_at = EVOLVING_DIM + TRANSFORM_DIM * sc.transforms;
    let (dxr_f, dxt_f) = sc
        .belief
        .initialize_transform(last, Some(&sc.factors[last]), insert_at, &h_r, &h_tau, &h_m, &r, sigma)
        .expect("well-conditioned init");
    let (dxr_d, dxt_d) = dense.initialize_transform_flat(last, insert_at, &h_r, &h_tau, &h_m, &r, sigma).expect("SPD innovation");
    out.initialize = joint_discrepancy(&sc.belief, &sc.factors, &dense).max((dxr_f - dxr_d).amax()).max((dxt_f - dxt_d).amax());

    let refs: Vec<_> = sc.factors.iter().collect();
    let mut dense = DenseJoint::from_belief(&sc.belief, &refs);
    let off = sc.belief.dim() - CLONE_DIM * (sc.clones + 1);
    sc.belief.remove_block(off, CLONE_DIM);
    dense.remove_block(off, CLONE_DIM);
    out.marginalize = joint_discrepancy(&sc.belief, &sc.factors, &dense);
    out
}

/// Minimum eigenvalue of `P⁺_SKF − P⁺_EKF` after one random map-based update.
pub fn consistency_ordering_trial(rng: &mut ChaCha8Rng) -> f64 {
    let sc = OracleScenario::generate(rng, 2, 120);
    let dense = sc.dense();
    let d = sc.device_dim();
    let n = dense.p.nrows();
    let (np, nf) = sc.layouts[0];
    let rows = 2 * rng.random_range(2..8usize);
    let mut h = DMatrix::zeros(rows, n);
    h.columns_mut(0, d).copy_from(&random_matrix(rng, rows, d, 1.0));
    h.columns_mut(d, sc.factors[0].dim()).copy_from(&random_map_jacobian(rng, rows, np, nf));
    let r = random_matrix(rng, rows, 1, 1.0).column(0).into_owned();
    let rn = DMatrix::identity(rows, rows) * 0.5;
    let (mut xs, mut ps) = (DVector::zeros(n), dense.p.clone());
    let (mut xe, mut pe) = (DVector::zeros(n), dense.p.clone());
    dense_skf_update(&mut xs, &mut ps, &h, &r, &rn, d).expect("SPD innovation");
    dense_ekf_update(&mut xe, &mut pe, &h, &r, &rn).expect("SPD innovation");
    let diff = &ps - &pe;
    let diff = (&diff + diff.transpose()) * 0.5;
    min_eigenvalue(&diff, 1e-9).unwrap_or(f64::NEG_INFINITY)
}

/// One covariance-bound check on a two-sub-map cooperative mapping problem from
/// the simulator (≤ 40 poses, ≤ 80 features).
pub fn covariance_bound_trial(seed: u64) -> Option<CovarianceBoundReport> {
    covariance_bound_trial_with(seed, false)
}

/// [`covariance_bound_trial`] with the stationarity sign optionally corrupted.
pub fn covariance_bound_trial_with(seed: u64, flip_stationarity_sign: bool) -> Option<CovarianceBoundReport> {
    let spec = TrajectorySpec { phase: 0.37 * seed as f64, ..TrajectorySpec::room(19.0, 1) };
    let landmarks = 50 + (seed % 30) as usize;
    let world = WorldFeatures::generate(&WorldSpec::room(landmarks, 0), seed).ok()?;
    let noise = NoiseConfig::default();
    let s = generate_session(&spec, &world, &CameraModel::default(), &noise, seed).ok()?;
    let data = MappingData::from_session(&s, &world, noise.pixel_sigma, &MappingNoise::default(), 5, seed + 1).ok()?;
    let part = crate::mapper::partition_submaps(&data, 2).ok()?;
    let cm = solve_cm_constrained(&data, &part, &MapperConfig::default()).ok()?;
    let h1 = cm.hessians[0].to_dense();
    let h2 = cm.hessians[1].to_dense();
    let k = &cm.constraints;
    covariance_bound_check(&h1, &h2, &k.a1, &k.a2, &k.b, 1e-8, flip_stationarity_sign).ok()
}

/// Relative Frobenius error between an analytic Jacobian and its central
/// differences.
fn rel_err(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(1e-12)
}

fn random_rotation(rng: &mut ChaCha8Rng, scale: f64) -> nalgebra::UnitQuaternion<f64> {
    exp_so3(&Vec3::new(gauss(rng), gauss(rng), gauss(rng)).scale(scale))
}

/// Worst relative error of the local-feature Jacobians over `trials` random
/// configurations (pose θ, pose p, feature).
pub fn local_jacobian_fd(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let cam = CameraModel::default();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let pose = Pose::new(random_rotation(rng, 0.5), Vec3::new(gauss(rng), gauss(rng), gauss(rng)));
        let body = Vec3::new(0.6 * gauss(rng), 0.6 * gauss(rng), 3.0 + rng.random::<f64>() * 3.0);
        let p_f = pose.to_reference(&body);
        let (jac, _) = local_feature_jacobians(&cam, &[pose], &[0], &p_f);
        let j = jac[0];
        let proj = |pose: &Pose, f: &Vec3| cam.project(&pose.to_body(f)).unwrap();
        let mut num = DMatrix::zeros(2, 9);
        for k in 0..9 {
            let mut d = Vec3::zeros();
            d[k % 3] = eps;
            let (plus, minus) = match k / 3 {
                0 => (proj(&Pose::new(perturb(&pose.q, &d), pose.p), &p_f), proj(&Pose::new(perturb(&pose.q, &-d), pose.p), &p_f)),
                1 => (proj(&Pose::new(pose.q, pose.p + d), &p_f), proj(&Pose::new(pose.q, pose.p - d), &p_f)),
                _ => (proj(&pose, &(p_f + d)), proj(&pose, &(p_f - d))),
            };
            num.column_mut(k).copy_from(&((plus - minus) / (2.0 * eps)));
        }
        let mut ana = DMatrix::zeros(2, 9);
        ana.view_mut((0, 0), (2, 3)).copy_from(&j.d_theta);
        ana.view_mut((0, 3), (2, 3)).copy_from(&j.d_position);
        ana.view_mut((0, 6), (2, 3)).copy_from(&j.d_feature);
        worst = worst.max(rel_err(&ana, &num));
    }
    worst
}

/// Worst relative error of the mapped-feature Jacobians (device θ, p,
/// transform yaw and translation, anchor θ, p, feature).
pub fn mapped_jacobian_fd(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let cam = CameraModel::default();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let device = Pose::new(random_rotation(rng, 0.5), Vec3::new(gauss(rng), gauss(rng), gauss(rng)));
        let tau = MapTransform4DoF { yaw: 0.3 * gauss(rng), translation: Vec3::new(0.3 * gauss(rng), 0.3 * gauss(rng), 0.1 * gauss(rng)) };
        let body = Vec3::new(0.6 * gauss(rng), 0.6 * gauss(rng), 3.0 + rng.random::<f64>() * 3.0);
        let x_g = device.to_reference(&body);
        let anchor = Pose::new(random_rotation(rng, 0.5), tau.apply_inverse(&x_g) + Vec3::new(gauss(rng), gauss(rng), gauss(rng)));
        let f = anchor.to_body(&tau.apply_inverse(&x_g));
        let j = mapped_feature_jacobians(&cam, &device, &tau, &anchor, &f).unwrap();
        let h = |dv: &Pose, t: &MapTransform4DoF, a: &Pose, f: &Vec3| -> Vector2<f64> {
            cam.project(&dv.to_body(&t.apply(&a.to_reference(f)))).unwrap()
        };
        let mut num = DMatrix::zeros(2, 19);
        for k in 0..19 {
            let mut d = Vec3::zeros();
            let (plus, minus) = match k {
                0..=2 => {
                    d[k] = eps;
                    (h(&Pose::new(perturb(&device.q, &d), device.p), &tau, &anchor, &f), h(&Pose::new(perturb(&device.q, &-d), device.p), &tau, &anchor, &f))
                }
                3..=5 => {
                    d[k - 3] = eps;
                    (h(&Pose::new(device.q, device.p + d), &tau, &anchor, &f), h(&Pose::new(device.q, device.p - d), &tau, &anchor, &f))
                }
                6 => (h(&device, &tau.perturbed(eps, &d), &anchor, &f), h(&device, &tau.perturbed(-eps, &d), &anchor, &f)),
                7..=9 => {
                    d[k - 7] = eps;
                    (h(&device, &tau.perturbed(0.0, &d), &anchor, &f), h(&device, &tau.perturbed(0.0, &-d), &anchor, &f))
                }
                10..=12 => {
                    d[k - 10] = eps;
                    (h(&device, &tau, &Pose::new(perturb(&anchor.q, &d), anchor.p), &f), h(&device, &tau, &Pose::new(perturb(&anchor.q, &-d), anchor.p), &f))
                }
                13..=15 => {
                    d[k - 13] = eps;
                    (h(&device, &tau, &Pose::new(anchor.q, anchor.p + d), &f), h(&device, &tau, &Pose::new(anchor.q, anchor.p - d), &f))
                }
                _ => {
                    d[k - 16] = eps;
                    (h(&device, &tau, &anchor, &(f + d)), h(&device, &tau, &anchor, &(f - d)))
                }
            };
            num.column_mut(k).copy_from(&((plus - minus) / (2.0 * eps)));
        }
        let mut ana = DMatrix::zeros(2, 19);
        ana.view_mut((0, 0), (2, 3)).copy_from(&j.d_theta);
        ana.view_mut((0, 3), (2, 3)).copy_from(&j.d_position);
        ana.view_mut((0, 6), (2, 1)).copy_from(&j.d_yaw);
        ana.view_mut((0, 7), (2, 3)).copy_from(&j.d_translation);
        ana.view_mut((0, 10), (2, 3)).copy_from(&j.d_anchor_theta);
        ana.view_mut((0, 13), (2, 3)).copy_from(&j.d_anchor_position);
        ana.view_mut((0, 16), (2, 3)).copy_from(&j.d_feature);
        worst = worst.max(rel_err(&ana, &num));
    }
    worst
}

/// Worst relative error of `Φ` against central differences of the IMU
/// integrator over random start states and short IMU windows.
pub fn transition_fd(rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let noise = ImuNoise::from(&NoiseConfig::default());
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let start = DeviceState::from_truth(&TruthState {
            t: 0.0,
            q: random_rotation(rng, 1.0),
            p: Vec3::new(gauss(rng), gauss(rng), gauss(rng)),
            v: Vec3::new(gauss(rng), gauss(rng), gauss(rng)),
            bg: Vec3::new(gauss(rng), gauss(rng), gauss(rng)) * 0.01,
            ba: Vec3::new(gauss(rng), gauss(rng), gauss(rng)) * 0.1,
        });
        let (w0, a0) = (Vec3::new(gauss(rng), gauss(rng), gauss(rng)) * 0.5, Vec3::new(gauss(rng), gauss(rng), 9.81 + gauss(rng)));
        let (w1, a1) = (Vec3::new(gauss(rng), gauss(rng), gauss(rng)) * 0.2, Vec3::new(gauss(rng), gauss(rng), gauss(rng)) * 0.5);
        let samples: Vec<ImuSample> = (0..21)
            .map(|k| {
                let t = k as f64 * 0.005;
                ImuSample { t, gyro: w0 + w1 * (8.0 * t).sin(), accel: a0 + a1 * (6.0 * t).cos() }
            })
            .collect();
        let mut end = start.clone();
        let (phi, _) = propagate_nominal(&mut end, &samples, None, &noise).expect("ordered samples");
        let mut num = DMatrix::zeros(EVOLVING_DIM, EVOLVING_DIM);
        for i in 0..EVOLVING_DIM {
            let mut dx = DVector::zeros(EVOLVING_DIM);
            dx[i] = eps;
            let run = |dx: &DVector<f64>| {
                let mut s = start.clone();
                s.apply(dx);
                propagate_nominal(&mut s, &samples, None, &noise).expect("ordered samples");
                TruthState { t: s.t, q: s.q, p: s.p, v: s.v, bg: s.bg, ba: s.ba }
            };
            let col = (end.evolving_error(&run(&dx)) - end.evolving_error(&run(&-dx.clone()))) / (2.0 * eps);
            num.column_mut(i).copy_from(&col);
        }
        let ana = DMatrix::from_column_slice(EVOLVING_DIM, EVOLVING_DIM, phi.as_slice());
        worst = worst.max(rel_err(&ana, &num));
    }
    worst
}

/// `J` for a random map Jacobian equals the dense whitened product.
pub fn whitened_jacobian_check(rng: &mut ChaCha8Rng) -> f64 {
    let h = random_map_hessian(rng, 4, 10);
    let g = cholesky(&h, Ordering::FillReducing).expect("SPD");
    let hm = random_map_jacobian(rng, 6, 4, 10);
    let j = whitened_map_jacobian(&g, &hm).expect("dims");
    let lhs = &j * j.transpose();
    let rhs = &hm * h.to_dense().try_inverse().expect("SPD") * hm.transpose();
    (lhs - rhs).amax()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn property(name: &'static str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult { name, passed, detail }
}

/// The full property battery at a size that finishes in about a minute.
pub fn verify_suite(seed: u64) -> Vec<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let oracle = (0..30).map(|k| oracle_equivalence_trial(&mut rng, 1 + k % 3, 300).max()).fold(0.0, f64::max);
    out.push(property("oracle equivalence", oracle < 1e-8, format!("max discrepancy {oracle:.2e} over 30 scenarios")));

    let ordering = (0..100).map(|_| consistency_ordering_trial(&mut rng)).fold(f64::INFINITY, f64::min);
    out.push(property("SKF/EKF covariance ordering", ordering >= -1e-9, format!("min eigenvalue {ordering:.2e}")));

    let reports: Vec<_> = (0..10).map(|k| covariance_bound_trial(seed.wrapping_add(k))).collect();
    let kkt_ok = reports.iter().all(|r| r.as_ref().is_some_and(CovarianceBoundReport::passed));
    out.push(property("KKT covariance bound", kkt_ok, format!("{}/10 problems pass", reports.iter().flatten().filter(|r| r.passed()).count())));

    let mutated = covariance_bound_trial_with(seed, true);
    let caught = mutated.as_ref().is_some_and(|r| !r.passed());
    out.push(property("KKT mutation detected", caught, format!("sign-flipped constraint rejected: {caught}")));

    let local = local_jacobian_fd(&mut rng, 100);
    let mapped = mapped_jacobian_fd(&mut rng, 100);
    let phi = transition_fd(&mut rng, 100);
    out.push(property("local feature Jacobians", local < 1e-5, format!("max relative error {local:.1e}")));
    out.push(property("mapped feature Jacobians", mapped < 1e-5, format!("max relative error {mapped:.1e}")));
    out.push(property("state transition", phi < 1e-5, format!("max relative error {phi:.1e}")));

    let whitened = whitened_jacobian_check(&mut rng);
    out.push(property("whitened map Jacobian", whitened < 1e-9, format!("max error {whitened:.1e}")));

    let p = nalgebra::Matrix3::new(2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5);
    let l = p.cholesky().expect("SPD").l();
    let errors: Vec<Vec3> = (0..10_000).map(|_| l * Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng))).collect();
    let nees = crate::bench::nees_series(&errors, &vec![p; errors.len()]).map(|s| s.mean).unwrap_or(f64::NAN);
    out.push(property("NEES calibration", (nees - 3.0).abs() < 0.1, format!("average NEES {nees:.3} over 10000 draws")));
    out
}
