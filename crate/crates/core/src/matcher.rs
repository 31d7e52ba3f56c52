//! Simulated 2D-3D association: candidate mapping images near the current
//! pose, id-oracle matching inside a pixel search radius, synthetic false
//! matches, and per-feature Mahalanobis gating.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix2, Vector2};
use rand::Rng;

use crate::geom::{CameraModel, MapTransform4DoF, Pose};
use crate::mapper::Submap;
use crate::sim::FeatureObservation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// No transform yet: the whole sub-map is the candidate set.
    PoseLess,
    PoseAssisted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    /// Id of the observed world point.
    pub observed_id: u32,
    /// Index of the matched feature within its sub-map.
    pub feature: usize,
    pub submap: usize,
    /// False match created by injection.
    pub injected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub matches: Vec<Correspondence>,
    pub mode: PipelineMode,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    pub max_distance: f64,
    pub max_angle_deg: f64,
    /// Fraction of the smaller image's feature count two images must share.
    pub covisibility_fraction: f64,
    pub search_radius_px: f64,
    pub injection_rate: f64,
    /// χ² bound of the per-feature gate (2 d.o.f., 95%).
    pub gate_threshold: f64,
    pub min_pose_assisted: usize,
    pub min_pose_less: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            max_distance: 3.0,
            max_angle_deg: 45.0,
            covisibility_fraction: 0.2,
            search_radius_px: 30.0,
            injection_rate: 0.0,
            gate_threshold: 5.991,
            min_pose_assisted: 13,
            min_pose_less: 7,
        }
    }
}

/// Mapping poses within range and viewing cone of the device, then expanded
/// once by co-visibility.
pub fn candidate_images_pose_assisted(
    device: &Pose,
    transform: &MapTransform4DoF,
    submap: &Submap,
    config: &MatcherConfig,
) -> BTreeSet<usize> {
    let p_m = transform.apply_inverse(&device.p);
    let axis_m = transform.rotation().transpose() * device.optical_axis();
    let cos_max = config.max_angle_deg.to_radians().cos();
    let near: BTreeSet<usize> = submap
        .poses
        .iter()
        .enumerate()
        .filter(|(_, p)| (p.p - p_m).norm() <= config.max_distance && p.optical_axis().dot(&axis_m) >= cos_max - 1e-12)
        .map(|(i, _)| i)
        .collect();
    let sets: Vec<BTreeSet<u32>> = submap.visibility.iter().map(|v| v.iter().copied().collect()).collect();
    let mut out = near.clone();
    for j in 0..submap.poses.len() {
        if near.contains(&j) {
            continue;
        }
        let bridged = near.iter().any(|&i| {
            let small = sets[i].len().min(sets[j].len());
            let need = ((config.covisibility_fraction * small as f64).ceil() as usize).max(1);
            small > 0 && sets[i].intersection(&sets[j]).count() >= need
        });
        if bridged {
            out.insert(j);
        }
    }
    out
}

/// Features seen from any of the candidate images.
pub fn candidate_features(submap: &Submap, images: &BTreeSet<usize>) -> BTreeSet<usize> {
    images.iter().flat_map(|&i| submap.visibility[i].iter().map(|&j| j as usize)).collect()
}

/// `id → feature index` for a sub-map.
pub fn feature_lookup(submap: &Submap) -> HashMap<u32, usize> {
    submap.features.iter().enumerate().map(|(j, f)| (f.id, j)).collect()
}

/// Matches observations against `candidates` by id. In pose-assisted mode a
/// match must reproject within the search radius under `estimate`. With
/// probability `injection_rate` a true match is replaced by a different
/// candidate.
#[allow(clippy::too_many_arguments)]
pub fn match_features<R: Rng>(
    observations: &[FeatureObservation],
    submap_index: usize,
    submap: &Submap,
    lookup: &HashMap<u32, usize>,
    candidates: &BTreeSet<usize>,
    estimate: Option<(&Pose, &MapTransform4DoF)>,
    cam: &CameraModel,
    config: &MatcherConfig,
    rng: &mut R,
) -> CorrespondenceSet {
    let mode = if estimate.is_some() { PipelineMode::PoseAssisted } else { PipelineMode::PoseLess };
    let pool: Vec<usize> = candidates.iter().copied().collect();
    let mut used = BTreeSet::new();
    let mut matches = Vec::new();
    for obs in observations {
        let Some(&j) = lookup.get(&obs.feature_id) else { continue };
        if !candidates.contains(&j) {
            continue;
        }
        if let Some((device, tau)) = estimate {
            let f = &submap.features[j];
            let x_g = tau.apply(&submap.poses[f.anchor].to_reference(&f.position));
            match cam.project(&device.to_body(&x_g)) {
                Ok(uv) if (uv - obs.pixel).norm() <= config.search_radius_px => {}
                _ => continue,
            }
        }
        let mut feature = j;
        let mut injected = false;
        if config.injection_rate > 0.0 && pool.len() > 1 && rng.random::<f64>() < config.injection_rate {
            loop {
                let k = pool[rng.random_range(0..pool.len())];
                if k != j {
                    feature = k;
                    break;
                }
            }
            injected = true;
        }
        if !used.insert(feature) {
            continue;
        }
        matches.push(Correspondence { pixel: obs.pixel, observed_id: obs.feature_id, feature, submap: submap_index, injected });
    }
    CorrespondenceSet { matches, mode }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub accepted: CorrespondenceSet,
    /// Index into the input set of each accepted match.
    pub kept: Vec<usize>,
    /// Squared Mahalanobis distance of every input match.
    pub distances: Vec<f64>,
}

/// Per-feature χ² test `rᵀ S_f⁻¹ r` with `(r, S_f)` from the innovation of
/// each feature alone. When fewer than `min_survivors` pass, everything is
/// rejected.
pub fn gate(
    set: &CorrespondenceSet,
    innovations: &[(Vector2<f64>, Matrix2<f64>)],
    config: &MatcherConfig,
    min_survivors: usize,
) -> GateOutcome {
    assert_eq!(set.len(), innovations.len());
    let distances: Vec<f64> = innovations
        .iter()
        .map(|(r, s)| s.try_inverse().map(|si| (r.transpose() * si * r)[0]).unwrap_or(f64::INFINITY))
        .collect();
    let mut kept: Vec<usize> = (0..set.len()).filter(|&k| distances[k] <= config.gate_threshold).collect();
    if kept.len() < min_survivors {
        kept.clear();
    }
    let matches = kept.iter().map(|&k| set.matches[k]).collect();
    GateOutcome { accepted: CorrespondenceSet { matches, mode: set.mode }, kept, distances }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::mapper::MapFeature;
    use crate::sparse::{cholesky, Ordering, SparseSymmetric};
    use nalgebra::UnitQuaternion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn looking_along_x(p: Vec3) -> Pose {
        // Body z along world x.
        let q = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), -std::f64::consts::FRAC_PI_2);
        Pose::new(q, p)
    }

    fn toy_submap(poses: Vec<Pose>, visibility: Vec<Vec<u32>>, features: Vec<MapFeature>) -> Submap {
        let dim = 6 * poses.len() + 3 * features.len();
        let h = SparseSymmetric::from_dense(&nalgebra::DMatrix::identity(dim, dim));
        let g = cholesky(&h, Ordering::Natural).unwrap();
        Submap::new(0, poses, features, visibility, g, MapTransform4DoF::identity())
    }

    #[test]
    fn own_pose_is_candidate_and_far_pose_is_not() {
        let poses = vec![looking_along_x(Vec3::zeros()), looking_along_x(Vec3::new(0.0, 10.0, 0.0))];
        let sm = toy_submap(poses.clone(), vec![vec![], vec![]], vec![]);
        let cfg = MatcherConfig::default();
        let c = candidate_images_pose_assisted(&poses[0], &MapTransform4DoF::identity(), &sm, &cfg);
        assert_eq!(c, BTreeSet::from([0]));
        let c = candidate_images_pose_assisted(&looking_along_x(Vec3::new(20.0, 0.0, 0.0)), &MapTransform4DoF::identity(), &sm, &cfg);
        assert!(c.is_empty());
    }

    #[test]
    fn covisibility_bridges_far_image() {
        let poses = vec![looking_along_x(Vec3::zeros()), looking_along_x(Vec3::new(0.0, 10.0, 0.0)), looking_along_x(Vec3::new(0.0, -10.0, 0.0))];
        // Pose 1 shares 3 of 10 features with pose 0 (threshold 2); pose 2 shares 1 of 10.
        let vis0: Vec<u32> = (0..10).collect();
        let vis1: Vec<u32> = (7..17).collect();
        let vis2: Vec<u32> = (9..19).collect();
        let feats = (0..19).map(|i| MapFeature { id: i, anchor: 0, position: Vec3::new(0.0, 0.0, 1.0) }).collect();
        let sm = toy_submap(poses.clone(), vec![vis0, vis1, vis2], feats);
        let c = candidate_images_pose_assisted(&poses[0], &MapTransform4DoF::identity(), &sm, &MatcherConfig::default());
        assert_eq!(c, BTreeSet::from([0, 1]));
    }

    fn scene() -> (Submap, Pose, Vec<FeatureObservation>, CameraModel) {
        let cam = CameraModel::default();
        let pose = looking_along_x(Vec3::zeros());
        let feats: Vec<MapFeature> = (0..30)
            .map(|i| {
                let body = Vec3::new(-1.0 + 0.07 * i as f64, -0.5 + 0.033 * i as f64, 4.0 + 0.05 * i as f64);
                MapFeature { id: 100 + i, anchor: 0, position: body }
            })
            .collect();
        let obs = feats
            .iter()
            .map(|f| FeatureObservation { t: 0.0, feature_id: f.id, pixel: cam.project(&f.position).unwrap(), is_outlier: false })
            .collect();
        let vis = vec![(0..30).collect()];
        (toy_submap(vec![pose], vis, feats), pose, obs, cam)
    }

    #[test]
    fn perfect_estimate_matches_everything() {
        let (sm, pose, obs, cam) = scene();
        let cfg = MatcherConfig::default();
        let lookup = feature_lookup(&sm);
        let cands = candidate_features(&sm, &BTreeSet::from([0]));
        let tau = MapTransform4DoF::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = match_features(&obs, 0, &sm, &lookup, &cands, Some((&pose, &tau)), &cam, &cfg, &mut rng);
        assert_eq!(set.len(), 30);
        assert!(set.matches.iter().all(|m| !m.injected && sm.features[m.feature].id == m.observed_id));
        assert_eq!(set.mode, PipelineMode::PoseAssisted);
    }

    #[test]
    fn offset_beyond_radius_matches_nothing() {
        let (sm, pose, obs, cam) = scene();
        let cfg = MatcherConfig::default();
        // A yaw offset of 0.1 rad displaces every projection by ≥ f·tan(0.1)·… > 30 px.
        let tau = MapTransform4DoF { yaw: 0.0, translation: Vec3::new(0.0, 0.0, 0.0) };
        let shifted = Pose::new(UnitQuaternion::from_axis_angle(&Vec3::x_axis(), 0.1) * pose.q, pose.p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cands = candidate_features(&sm, &BTreeSet::from([0]));
        let set = match_features(&obs, 0, &sm, &feature_lookup(&sm), &cands, Some((&shifted, &tau)), &cam, &cfg, &mut rng);
        assert!(0.1f64.tan() * cam.fy > 30.0);
        assert!(set.is_empty(), "{}", set.len());
    }

    #[test]
    fn injection_rate_is_binomial() {
        let (sm, pose, obs, cam) = scene();
        let cfg = MatcherConfig { injection_rate: 0.05, ..MatcherConfig::default() };
        let lookup = feature_lookup(&sm);
        let cands = candidate_features(&sm, &BTreeSet::from([0]));
        let tau = MapTransform4DoF::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut trials, mut injected) = (0usize, 0usize);
        while trials < 1000 {
            let single = &obs[trials % obs.len()..trials % obs.len() + 1];
            let set = match_features(single, 0, &sm, &lookup, &cands, Some((&pose, &tau)), &cam, &cfg, &mut rng);
            injected += set.matches.iter().filter(|m| m.injected).count();
            trials += 1;
        }
        let mean = 1000.0 * 0.05;
        let sd = (1000.0 * 0.05 * 0.95f64).sqrt();
        assert!((injected as f64 - mean).abs() <= 3.0 * sd, "{injected}");
    }

    #[test]
    fn gate_rejects_gross_errors_and_small_sets() {
        let (sm, pose, obs, cam) = scene();
        let cands = candidate_features(&sm, &BTreeSet::from([0]));
        let tau = MapTransform4DoF::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = match_features(&obs, 0, &sm, &feature_lookup(&sm), &cands, Some((&pose, &tau)), &cam, &MatcherConfig::default(), &mut rng);
        let s = Matrix2::identity() * 2.0;
        let mut inn: Vec<_> = (0..set.len()).map(|_| (Vector2::zeros(), s)).collect();
        inn[3].0 = Vector2::new(100.0, 0.0);
        let out = gate(&set, &inn, &MatcherConfig::default(), 13);
        assert_eq!(out.accepted.len(), set.len() - 1);
        assert!(!out.kept.contains(&3));
        let out = gate(&set, &inn, &MatcherConfig::default(), 40);
        assert!(out.accepted.is_empty());
    }
}
