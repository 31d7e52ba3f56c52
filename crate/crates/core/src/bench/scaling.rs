//! Storage and timing scaling of map factors.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::experiment::ExperimentError;
use super::metrics::median;
use crate::filter::{FilterBelief, CLONE_DIM, EVOLVING_DIM, TRANSFORM_DIM};
use crate::geom::CameraModel;
use crate::mapper::{build_submaps, MapBundle, MapperConfig, Submap};
use crate::sim::{generate_session, MappingData, MappingNoise, NoiseConfig, TrajectorySpec, WorldFeatures, WorldSpec};

/// Map error-state dims per 12 m corridor segment walked three times.
const DIM_PER_SEGMENT: f64 = 540.0;

/// Maps a corridor walked three times, long enough for an error-state dim
/// near `target_dim`, split into `submaps` sub-maps.
pub fn corridor_map(target_dim: usize, submaps: usize, seed: u64) -> Result<MapBundle, ExperimentError> {
    let scale = (target_dim as f64 / DIM_PER_SEGMENT).max(0.5);
    let len = 12.0 * scale;
    let mut spec = TrajectorySpec::corridor(len, 3.0 * len);
    spec.revisit_count = 3;
    build_map(&spec, (3.0 * len) as usize, submaps, seed)
}

fn build_map(spec: &TrajectorySpec, landmarks: usize, submaps: usize, seed: u64) -> Result<MapBundle, ExperimentError> {
    let world = WorldFeatures::generate(&WorldSpec::for_trajectory(spec, landmarks, 0), seed)?;
    let cam = CameraModel::default();
    let noise = NoiseConfig::default();
    let session = generate_session(spec, &world, &cam, &noise, seed + 1)?;
    let data = MappingData::from_session(&session, &world, noise.pixel_sigma, &MappingNoise::default(), 5, seed + 2)?;
    let parts = build_submaps(&data, submaps, &MapperConfig::default())?;
    Ok(MapBundle::from_submaps(parts, cam, noise.pixel_sigma))
}

/// Map error-state dims per lap of the room trajectory.
const DIM_PER_LAP: f64 = 420.0;

/// Maps a room circled repeatedly, one lap per `DIM_PER_LAP` dims of
/// `target_dim`, so the map densifies rather than extends.
pub fn revisit_map(target_dim: usize, submaps: usize, seed: u64) -> Result<MapBundle, ExperimentError> {
    let laps = (target_dim as f64 / DIM_PER_LAP).round().max(1.0) as usize;
    let spec = TrajectorySpec::room(20.0 * laps as f64, laps);
    build_map(&spec, 60 * laps, submaps, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub submap: usize,
    pub dim: usize,
    pub nnz: usize,
    pub factor_bytes: usize,
    /// Bytes a dense covariance of the same dim would take.
    pub dense_bytes: usize,
    pub ratio: f64,
}

pub fn memory_report(bundle: &MapBundle) -> Vec<MemoryRow> {
    bundle
        .submaps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dim = s.dim();
            let factor_bytes = s.factor.storage_bytes();
            let dense_bytes = 8 * dim * dim;
            MemoryRow { submap: i, dim, nnz: s.factor.nnz(), factor_bytes, dense_bytes, ratio: factor_bytes as f64 / dense_bytes as f64 }
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Jacobian of `count` observations of distinct features, each touching the
/// feature's anchor pose and position, with random entries.
fn feature_jacobian(sm: &Submap, count: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(2 * count, sm.dim());
    let step = (sm.features.len() / count.max(1)).max(1);
    for k in 0..count {
        let j = (k * step + rng.random_range(0..step)) % sm.features.len();
        let f = &sm.features[j];
        let cols = (sm.pose_offsets[f.anchor]..sm.pose_offsets[f.anchor] + 6).chain(sm.feature_offsets[j]..sm.feature_offsets[j] + 3);
        for c in cols {
            h[(2 * k, c)] = rng.random::<f64>() - 0.5;
            h[(2 * k + 1, c)] = rng.random::<f64>() - 0.5;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacksolvePoint {
    pub dim: usize,
    pub nnz: usize,
    pub reps: usize,
    pub median_s: f64,
}

/// Median wall time of `G⁻¹P H_Mᵀ` for a single feature observation.
pub fn backsolve_benchmark(sm: &Submap, reps: usize, seed: u64) -> BacksolvePoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jacobians: Vec<DMatrix<f64>> = (0..reps).map(|_| feature_jacobian(sm, 1, &mut rng).transpose()).collect();
    for h in jacobians.iter().take(5) {
        std::hint::black_box(sm.factor.back_solve_transposed(h).expect("dims match"));
    }
    let times: Vec<f64> = jacobians
        .iter()
        .map(|h| {
            let t = Instant::now();
            std::hint::black_box(sm.factor.back_solve_transposed(h).expect("dims match"));
            t.elapsed().as_secs_f64()
        })
        .collect();
    BacksolvePoint { dim: sm.dim(), nnz: sm.factor.nnz(), reps, median_s: median(&times) }
}

/// Belief with every sub-map of `bundle` initialized and a full clone
/// window, correlated with the map through random `Γ` blocks.
pub fn loaded_belief(bundle: &MapBundle, clones: usize, rng: &mut ChaCha8Rng) -> FilterBelief {
    let l = bundle.submaps.len();
    let d = EVOLVING_DIM + TRANSFORM_DIM * l + CLONE_DIM * clones;
    let mut b = FilterBelief::new(DMatrix::identity(EVOLVING_DIM, EVOLVING_DIM), l);
    let mut p = DMatrix::identity(d, d) * 0.05;
    for (i, sm) in bundle.submaps.iter().enumerate() {
        let scale = 0.1 / (sm.dim() as f64).sqrt();
        let g = DMatrix::from_fn(d, sm.dim(), |_, _| scale * (rng.random::<f64>() - 0.5));
        p += &g * g.transpose();
        b.gamma[i] = Some(g);
    }
    b.p_rr = p;
    b
}

/// Median wall time of one map-based update with `correspondences`
/// observations of sub-map 0, the other sub-maps' cross-covariances
/// included.
pub fn map_update_benchmark(bundle: &MapBundle, correspondences: usize, reps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = loaded_belief(bundle, 10, &mut rng);
    let sm = &bundle.submaps[0];
    let d = base.dim();
    let times: Vec<f64> = (0..reps)
        .map(|_| {
            let h_m = feature_jacobian(sm, correspondences, &mut rng);
            let h_r = DMatrix::from_fn(2 * correspondences, d, |_, _| rng.random::<f64>() - 0.5);
            let r = DVector::from_fn(2 * correspondences, |_, _| rng.random::<f64>() - 0.5);
            let mut b = base.clone();
            let t = Instant::now();
            std::hint::black_box(b.map_update(0, &sm.factor, &h_r, &h_m, &r, 1.0).expect("SPD innovation"));
            t.elapsed().as_secs_f64()
        })
        .collect();
    median(&times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::MapFeature;
    use crate::geom::{MapTransform4DoF, Pose, Vec3};
    use crate::sparse::{cholesky, Ordering, SparseSymmetric};

    fn identity_submap(poses: usize, features: usize) -> Submap {
        let dim = 6 * poses + 3 * features;
        let g = cholesky(&SparseSymmetric::from_dense(&DMatrix::identity(dim, dim)), Ordering::Natural).unwrap();
        let feats = (0..features).map(|i| MapFeature { id: i as u32, anchor: 0, position: Vec3::z() }).collect();
        Submap::new(0, vec![Pose::identity(); poses], feats, vec![vec![]; poses], g, MapTransform4DoF::identity())
    }

    #[test]
    fn identity_map_memory() {
        let sm = identity_submap(10, 13);
        let bundle = MapBundle { gravity: Vec3::z(), pixel_sigma: 1.0, camera: CameraModel::default(), submaps: vec![sm] };
        let rows = memory_report(&bundle);
        assert_eq!(rows[0].dim, 99);
        assert_eq!(rows[0].nnz, 99);
        assert_eq!(rows[0].dense_bytes, 8 * 99 * 99);
        assert!(rows[0].factor_bytes <= 4 * 8 * 100);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn backsolve_timing_is_positive() {
        let sm = identity_submap(1, 1);
        let p = backsolve_benchmark(&sm, 20, 1);
        assert_eq!(p.dim, 9);
        assert!(p.median_s > 0.0);
    }
}
