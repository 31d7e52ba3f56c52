//! Frame-by-frame estimator driving propagation, map-based updates and
//! MSCKF local updates over either the factorized or the dense backend.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::belief::FilterBelief;
use super::dense::DenseJoint;
use super::msckf::{chi2_quantile, compress, project_track, triangulate};
use super::propagation::{propagate_nominal, ImuNoise, Mat15};
use super::state::{ClonePose, DeviceState, CLONE_DIM, EVOLVING_DIM, POS, TRANSFORM_DIM};
use super::{mapped_batch, FilterError, MeasurementBatch};
use crate::geom::{MapTransform4DoF, Pose, Vec3};
use crate::mapper::MapBundle;
use crate::matcher::{
    candidate_features, candidate_images_pose_assisted, feature_lookup, gate, match_features, CorrespondenceSet, MatcherConfig,
};
use crate::sim::{CameraFrame, ImuSample, Session, TruthState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorMode {
    /// Single map with its full Cholesky factor.
    Cskf,
    /// Several independent sub-maps.
    Scskf,
    /// Map treated as exact, pixel noise inflated to `sigma`.
    Inflated { sigma: f64 },
    NoMap,
    /// Dense joint covariance over device and map (small maps only).
    DenseOracle,
}

impl EstimatorMode {
    pub fn uses_map(&self) -> bool {
        !matches!(self, EstimatorMode::NoMap)
    }

    pub fn label(&self) -> &'static str {
        match self {
            EstimatorMode::Cskf => "cskf",
            EstimatorMode::Scskf => "scskf",
            EstimatorMode::Inflated { .. } => "inflated",
            EstimatorMode::NoMap => "nomap",
            EstimatorMode::DenseOracle => "oracle",
        }
    }
}

/// Initial standard deviations of the evolving state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialUncertainty {
    pub theta: f64,
    pub position: f64,
    pub gyro_bias: f64,
    pub velocity: f64,
    pub accel_bias: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self { theta: 0.01, position: 0.02, gyro_bias: 2e-3, velocity: 0.02, accel_bias: 2e-2 }
    }
}

impl InitialUncertainty {
    fn sigmas(&self) -> [f64; EVOLVING_DIM] {
        let mut s = [0.0; EVOLVING_DIM];
        for (b, v) in [self.theta, self.position, self.gyro_bias, self.velocity, self.accel_bias].iter().enumerate() {
            s[3 * b..3 * b + 3].fill(*v);
        }
        s
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(EVOLVING_DIM, self.sigmas().iter().map(|s| s * s)))
    }

    /// Truth perturbed by one draw from the initial covariance.
    pub fn sample(&self, truth: &TruthState, rng: &mut ChaCha8Rng) -> DeviceState {
        let mut s = DeviceState::from_truth(truth);
        let dx = DVector::from_iterator(EVOLVING_DIM, self.sigmas().iter().map(|sd| { let z: f64 = StandardNormal.sample(rng); sd * z }));
        s.apply(&dx);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub mode: EstimatorMode,
    /// Maximum number of clones kept.
    pub window: usize,
    pub pixel_sigma: f64,
    pub imu: ImuNoise,
    pub initial: InitialUncertainty,
    pub max_local_tracks: usize,
    pub max_map_correspondences: usize,
    pub min_track_length: usize,
    pub matcher: MatcherConfig,
    /// Pairs needed to attempt a transform initialization.
    pub init_min_features: usize,
    /// Reprojection trim radius (px) for initialization pairs.
    pub init_trim_px: f64,
    pub record_timing: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::Cskf,
            window: 10,
            pixel_sigma: 1.0,
            imu: ImuNoise { gyro: 1e-3, accel: 1e-2, gyro_walk: 1e-5, accel_walk: 1e-4 },
            initial: InitialUncertainty::default(),
            max_local_tracks: 40,
            max_map_correspondences: 30,
            min_track_length: 3,
            matcher: MatcherConfig::default(),
            init_min_features: 7,
            init_trim_px: 15.0,
            record_timing: false,
        }
    }
}

/// Covariance storage behind the estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Factorized(FilterBelief),
    Dense(DenseJoint),
}

impl Backend {
    pub fn device_covariance(&self) -> DMatrix<f64> {
        match self {
            Backend::Factorized(b) => b.p_rr.clone(),
            Backend::Dense(d) => d.device_block(),
        }
    }

    fn propagate(&mut self, phi: &Mat15, q: &Mat15) {
        match self {
            Backend::Factorized(b) => b.propagate(phi, q),
            Backend::Dense(d) => d.propagate(phi, q),
        }
    }

    fn augment_clone(&mut self) {
        match self {
            Backend::Factorized(b) => b.augment_clone(),
            Backend::Dense(d) => d.augment_clone(),
        }
    }

    fn remove_block(&mut self, offset: usize, len: usize) {
        match self {
            Backend::Factorized(b) => b.remove_block(offset, len),
            Backend::Dense(d) => d.remove_block(offset, len),
        }
    }

    fn local_update(&mut self, h: &DMatrix<f64>, r: &DVector<f64>, sigma: f64) -> Result<DVector<f64>, FilterError> {
        match self {
            Backend::Factorized(b) => b.local_update(h, r, sigma),
            Backend::Dense(d) => d.local_update(h, r, sigma),
        }
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            Backend::Factorized(b) => b.storage_bytes(),
            Backend::Dense(d) => 8 * d.p.len(),
        }
    }
}

/// Wall time and size of one map-based update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapUpdateTiming {
    pub submap: usize,
    pub correspondences: usize,
    pub nnz: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub t: f64,
    pub position: Vec3,
    pub truth_position: Vec3,
    pub position_covariance: Matrix3<f64>,
    pub nees_position: f64,
    pub rotation_error: f64,
    pub device_variances: DVector<f64>,
    pub local_tracks: usize,
    pub map_correspondences: usize,
    pub initialized_submaps: usize,
    pub propagate_s: f64,
    pub local_s: f64,
    pub map_s: f64,
    pub map_updates: Vec<MapUpdateTiming>,
}

/// Outcome counts of the per-feature map gate. Outliers are injected
/// matches whose innovation exceeds five pixel sigmas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateStats {
    pub inliers_tested: usize,
    pub inliers_accepted: usize,
    pub outliers_tested: usize,
    pub outliers_rejected: usize,
}

impl GateStats {
    pub fn merge(&mut self, other: &GateStats) {
        self.inliers_tested += other.inliers_tested;
        self.inliers_accepted += other.inliers_accepted;
        self.outliers_tested += other.outliers_tested;
        self.outliers_rejected += other.outliers_rejected;
    }

    pub fn inlier_acceptance(&self) -> f64 {
        self.inliers_accepted as f64 / self.inliers_tested.max(1) as f64
    }

    pub fn outlier_rejection(&self) -> f64 {
        self.outliers_rejected as f64 / self.outliers_tested.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct StepStats {
    local_tracks: usize,
    map_correspondences: usize,
    propagate_s: f64,
    local_s: f64,
    map_s: f64,
}

type Track = Vec<(usize, Vector2<f64>)>;

pub struct Estimator<'a> {
    pub config: FilterConfig,
    pub state: DeviceState,
    pub backend: Backend,
    bundle: Option<&'a MapBundle>,
    lookups: Vec<HashMap<u32, usize>>,
    tracks: BTreeMap<u32, Track>,
    imu_index: Option<usize>,
    frame: usize,
    rng: ChaCha8Rng,
    map_timings: Vec<MapUpdateTiming>,
    pub gate_stats: GateStats,
}

impl<'a> Estimator<'a> {
    pub fn new(config: FilterConfig, bundle: Option<&'a MapBundle>, initial: DeviceState, seed: u64) -> Result<Self, FilterError> {
        if config.window < 2 {
            return Err(FilterError::Config("window must hold at least two clones".into()));
        }
        if !(config.pixel_sigma > 0.0) {
            return Err(FilterError::Config("pixel sigma must be positive".into()));
        }
        let bundle = if config.mode.uses_map() { bundle } else { None };
        let submaps = bundle.map_or(0, |b| b.submaps.len());
        let belief = FilterBelief::new(config.initial.covariance(), submaps);
        let backend = match config.mode {
            EstimatorMode::DenseOracle => {
                let b = bundle.ok_or_else(|| FilterError::Config("oracle mode needs a map".into()))?;
                let factors: Vec<_> = b.submaps.iter().map(|s| &s.factor).collect();
                Backend::Dense(DenseJoint::from_belief(&belief, &factors))
            }
            _ => Backend::Factorized(belief),
        };
        let lookups = bundle.map_or_else(Vec::new, |b| b.submaps.iter().map(feature_lookup).collect());
        Ok(Self {
            config,
            state: initial,
            backend,
            bundle,
            lookups,
            tracks: BTreeMap::new(),
            imu_index: None,
            frame: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            map_timings: Vec::new(),
            gate_stats: GateStats::default(),
        })
    }

    fn map_sigma(&self) -> f64 {
        match self.config.mode {
            EstimatorMode::Inflated { sigma } => sigma,
            _ => self.config.pixel_sigma,
        }
    }

    fn exact_map(&self) -> bool {
        matches!(self.config.mode, EstimatorMode::Inflated { .. })
    }

    fn apply(&mut self, dx: &DVector<f64>) {
        self.state.apply(dx);
    }

    /// Processes one camera frame; `imu` is the full IMU stream indexed by
    /// `frame.imu_index`.
    fn step(&mut self, imu: &[ImuSample], frame: &CameraFrame) -> Result<StepStats, FilterError> {
        let mut stats = StepStats::default();
        let t0 = Instant::now();
        if let Some(last) = self.imu_index {
            if frame.imu_index <= last {
                return Err(FilterError::NonMonotonicTimestamps { previous: imu[last].t, next: frame.t });
            }
            let prev = last.checked_sub(1).map(|k| &imu[k]);
            let (phi, q) = propagate_nominal(&mut self.state, &imu[last..=frame.imu_index], prev, &self.config.imu)?;
            self.backend.propagate(&phi, &q);
        }
        self.imu_index = Some(frame.imu_index);
        self.state.clones.push_back(ClonePose { frame: self.frame, t: self.state.t, pose: self.state.pose() });
        self.backend.augment_clone();
        stats.propagate_s = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let mut consumed = BTreeSet::new();
        if self.bundle.is_some() {
            stats.map_correspondences = self.map_phase(frame, &mut consumed)?;
            self.init_phase(frame, &mut consumed)?;
        }
        stats.map_s = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        stats.local_tracks = self.local_phase(frame, &consumed)?;
        self.marginalize();
        stats.local_s = t2.elapsed().as_secs_f64();
        self.frame += 1;
        Ok(stats)
    }

    fn innovation_blocks(&self, batch: &MeasurementBatch) -> Result<Vec<(Vector2<f64>, Matrix2<f64>)>, FilterError> {
        let bundle = self.bundle.expect("map phase without map");
        let factor = (!self.exact_map()).then(|| &bundle.submaps[batch.submap].factor);
        let s = match &self.backend {
            Backend::Factorized(b) => b.innovation_covariance(batch.submap, factor, &batch.h_r, &batch.h_m, batch.sigma)?,
            Backend::Dense(d) => d.innovation_covariance(batch.submap, &batch.h_r, &batch.h_m, batch.sigma),
        };
        Ok((0..batch.rows() / 2)
            .map(|k| (Vector2::new(batch.r[2 * k], batch.r[2 * k + 1]), s.fixed_view::<2, 2>(2 * k, 2 * k).into_owned()))
            .collect())
    }

    fn batch_for(&self, submap: usize, obs: &[(Vector2<f64>, usize)]) -> Result<MeasurementBatch, FilterError> {
        let bundle = self.bundle.expect("map phase without map");
        let slot = self.state.transform_slot(submap).ok_or(FilterError::TransformNotInitialized(submap))?;
        let tau = self.state.transforms[slot].1;
        mapped_batch(
            &bundle.camera,
            &self.state.pose(),
            self.state.dim(),
            &tau,
            Some(self.state.transform_offset(slot)),
            submap,
            &bundle.submaps[submap],
            obs,
            self.map_sigma(),
        )
    }

    /// Matches, gates and applies map-based updates against every
    /// initialized sub-map. Returns the number of correspondences used.
    fn map_phase(&mut self, frame: &CameraFrame, consumed: &mut BTreeSet<u32>) -> Result<usize, FilterError> {
        let bundle = self.bundle.expect("map phase without map");
        let device = self.state.pose();
        let mut sets: Vec<CorrespondenceSet> = Vec::new();
        for &(i, tau) in &self.state.transforms {
            let sm = &bundle.submaps[i];
            let images = candidate_images_pose_assisted(&device, &tau, sm, &self.config.matcher);
            let cands = candidate_features(sm, &images);
            let set = match_features(
                &frame.observations,
                i,
                sm,
                &self.lookups[i],
                &cands,
                Some((&device, &tau)),
                &bundle.camera,
                &self.config.matcher,
                &mut self.rng,
            );
            if !set.is_empty() {
                sets.push(set);
            }
        }
        // The sub-map with the most matches claims shared observations first.
        sets.sort_by(|a, b| b.len().cmp(&a.len()).then(a.matches[0].submap.cmp(&b.matches[0].submap)));
        let outlier_ids: BTreeSet<u32> = frame.observations.iter().filter(|o| o.is_outlier).map(|o| o.feature_id).collect();
        let mut claimed = BTreeSet::new();
        let mut accepted: Vec<(usize, Vec<(Vector2<f64>, usize, u32)>)> = Vec::new();
        for mut set in sets {
            set.matches.retain(|m| !claimed.contains(&m.observed_id));
            if set.is_empty() {
                continue;
            }
            let submap = set.matches[0].submap;
            let tau = self.state.transforms[self.state.transform_slot(submap).expect("matched an initialized sub-map")].1;
            let sm = &bundle.submaps[submap];
            set.matches.retain(|m| bundle.camera.project(&device.to_body(&tau.apply(&sm.feature_in_map(m.feature)))).is_ok());
            if set.is_empty() {
                continue;
            }
            let obs: Vec<_> = set.matches.iter().map(|m| (m.pixel, m.feature)).collect();
            let batch = self.batch_for(submap, &obs)?;
            let blocks = self.innovation_blocks(&batch)?;
            let out = gate(&set, &blocks, &self.config.matcher, 0);
            let far = 5.0 * self.config.pixel_sigma;
            for (k, m) in set.matches.iter().enumerate() {
                let pass = out.distances[k] <= self.config.matcher.gate_threshold;
                if m.injected {
                    if blocks[k].0.norm() > far {
                        self.gate_stats.outliers_tested += 1;
                        self.gate_stats.outliers_rejected += usize::from(!pass);
                    }
                } else if !outlier_ids.contains(&m.observed_id) {
                    self.gate_stats.inliers_tested += 1;
                    self.gate_stats.inliers_accepted += usize::from(pass);
                }
            }
            let kept: Vec<_> = out.accepted.matches.iter().map(|m| (m.pixel, m.feature, m.observed_id)).collect();
            claimed.extend(kept.iter().map(|k| k.2));
            if !kept.is_empty() {
                accepted.push((submap, kept));
            }
        }
        let total: usize = accepted.iter().map(|a| a.1.len()).sum();
        if total < self.config.matcher.min_pose_assisted {
            return Ok(0);
        }
        let mut budget = self.config.max_map_correspondences;
        let mut used = 0;
        for (submap, mut kept) in accepted {
            if budget == 0 {
                break;
            }
            if kept.len() > budget {
                let step = kept.len() as f64 / budget as f64;
                kept = (0..budget).map(|k| kept[(k as f64 * step) as usize]).collect();
            }
            budget -= kept.len();
            let obs: Vec<_> = kept.iter().map(|k| (k.0, k.1)).collect();
            let batch = self.batch_for(submap, &obs)?;
            let start = Instant::now();
            let dx = self.map_update(&batch)?;
            if self.config.record_timing {
                self.map_timings.push(MapUpdateTiming {
                    submap,
                    correspondences: kept.len(),
                    nnz: bundle.submaps[submap].factor.nnz(),
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            self.apply(&dx);
            used += kept.len();
            consumed.extend(kept.iter().map(|k| k.2));
        }
        Ok(used)
    }

    fn map_update(&mut self, batch: &MeasurementBatch) -> Result<DVector<f64>, FilterError> {
        let bundle = self.bundle.expect("map phase without map");
        let exact = self.exact_map();
        match &mut self.backend {
            Backend::Factorized(b) if exact => b.local_update(&batch.h_r, &batch.r, batch.sigma),
            Backend::Factorized(b) => {
                b.map_update(batch.submap, &bundle.submaps[batch.submap].factor, &batch.h_r, &batch.h_m, &batch.r, batch.sigma)
            }
            Backend::Dense(d) => d.map_update(batch.submap, &batch.h_r, &batch.h_m, &batch.r, batch.sigma),
        }
    }

    /// Initializes transforms of sub-maps with enough pose-less matches whose
    /// features can be triangulated from the local tracks.
    fn init_phase(&mut self, frame: &CameraFrame, consumed: &mut BTreeSet<u32>) -> Result<(), FilterError> {
        let bundle = self.bundle.expect("init phase without map");
        for i in 0..bundle.submaps.len() {
            if self.state.transform_slot(i).is_some() {
                continue;
            }
            let sm = &bundle.submaps[i];
            let free: Vec<_> = frame.observations.iter().filter(|o| !consumed.contains(&o.feature_id)).copied().collect();
            let all: BTreeSet<usize> = (0..sm.features.len()).collect();
            let set = match_features(&free, i, sm, &self.lookups[i], &all, None, &bundle.camera, &self.config.matcher, &mut self.rng);
            if set.len() < self.config.matcher.min_pose_less {
                continue;
            }
            if let Some(used) = self.try_initialize(i, &set)? {
                consumed.extend(used);
            }
        }
        Ok(())
    }

    fn try_initialize(&mut self, submap: usize, set: &CorrespondenceSet) -> Result<Option<Vec<u32>>, FilterError> {
        let bundle = self.bundle.expect("init phase without map");
        let cam = &bundle.camera;
        let sm = &bundle.submaps[submap];
        let current = self.state.pose();
        let mut pairs = Vec::new();
        for m in &set.matches {
            let Some(track) = self.tracks.get(&m.observed_id) else { continue };
            if track.len() + 1 < self.config.min_track_length {
                continue;
            }
            let mut poses = Vec::with_capacity(track.len() + 1);
            let mut pixels = Vec::with_capacity(track.len() + 1);
            for (f, z) in track {
                if let Some(c) = self.state.clone_index(*f) {
                    poses.push(self.state.clones[c].pose);
                    pixels.push(*z);
                }
            }
            poses.push(current);
            pixels.push(m.pixel);
            if let Ok(x_g) = triangulate(cam, &poses, &pixels, self.config.pixel_sigma) {
                pairs.push((m, sm.feature_in_map(m.feature), x_g));
            }
        }
        let need = self.config.init_min_features;
        let mut tau = MapTransform4DoF::identity();
        for _ in 0..2 {
            if pairs.len() < need {
                return Ok(None);
            }
            let src: Vec<Vec3> = pairs.iter().map(|p| p.1).collect();
            let dst: Vec<Vec3> = pairs.iter().map(|p| p.2).collect();
            let Some(t) = MapTransform4DoF::align(&src, &dst) else { return Ok(None) };
            let obs: Vec<_> = pairs.iter().map(|(m, _, _)| (m.pixel, m.feature)).collect();
            let Some(t) = refine_transform(cam, &current, t, submap, sm, &obs, self.config.pixel_sigma) else { return Ok(None) };
            tau = t;
            pairs.retain(|(m, x_m, _)| match cam.project(&current.to_body(&tau.apply(x_m))) {
                Ok(uv) => (uv - m.pixel).norm() <= self.config.init_trim_px,
                Err(_) => false,
            });
        }
        if pairs.len() < need {
            return Ok(None);
        }
        let obs: Vec<_> = pairs.iter().map(|(m, _, _)| (m.pixel, m.feature)).collect();
        let sigma = self.map_sigma();
        let batch = mapped_batch(cam, &current, self.state.dim(), &tau, None, submap, sm, &obs, sigma)?;
        let insert_at = self.state.transform_offset(self.state.transforms.len());
        let exact = self.exact_map();
        let result = match &mut self.backend {
            Backend::Factorized(b) => b.initialize_transform(
                submap,
                (!exact).then_some(&sm.factor),
                insert_at,
                &batch.h_r,
                &batch.h_tau,
                &batch.h_m,
                &batch.r,
                sigma,
            ),
            Backend::Dense(d) => d.initialize_transform_flat(submap, insert_at, &batch.h_r, &batch.h_tau, &batch.h_m, &batch.r, sigma),
        };
        let (dx_r, dx_tau) = match result {
            Ok(v) => v,
            Err(FilterError::DegenerateGeometry { .. } | FilterError::SingularInnovation | FilterError::InsufficientFeatures { .. }) => {
                return Ok(None)
            }
            Err(e) => return Err(e),
        };
        self.state.apply(&dx_r);
        let t = tau.perturbed(dx_tau[0], &Vec3::new(dx_tau[1], dx_tau[2], dx_tau[3]));
        self.state.transforms.push((submap, t));
        debug_assert_eq!(self.state.dim(), self.backend.device_covariance().nrows());
        debug_assert_eq!(insert_at + TRANSFORM_DIM, self.state.clone_offset(0));
        Ok(Some(pairs.iter().map(|(m, _, _)| m.observed_id).collect()))
    }

    /// Extends tracks with unconsumed observations and runs MSCKF updates on
    /// finished tracks and tracks about to lose their oldest clone.
    fn local_phase(&mut self, frame: &CameraFrame, consumed: &BTreeSet<u32>) -> Result<usize, FilterError> {
        for o in &frame.observations {
            if !consumed.contains(&o.feature_id) {
                self.tracks.entry(o.feature_id).or_default().push((self.frame, o.pixel));
            }
        }
        let oldest = (self.state.clones.len() > self.config.window).then(|| self.state.clones[0].frame);
        let mut ready: Vec<(u32, usize)> = Vec::new();
        let mut drop = Vec::new();
        for (id, track) in &self.tracks {
            let ended = track.last().map(|l| l.0) != Some(self.frame);
            let expiring = oldest.is_some_and(|f| track[0].0 == f);
            if ended || expiring {
                if track.len() >= self.config.min_track_length {
                    ready.push((*id, track.len()));
                } else if ended {
                    drop.push(*id);
                }
            }
        }
        ready.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ready.truncate(self.config.max_local_tracks);
        let bundle_cam = self.bundle.map(|b| b.camera);
        let cam = bundle_cam.unwrap_or_default();
        let sigma = self.config.pixel_sigma;
        let p = self.backend.device_covariance();
        let mut hs: Vec<DMatrix<f64>> = Vec::new();
        let mut rs: Vec<DVector<f64>> = Vec::new();
        for (id, _) in &ready {
            let track = self.tracks.remove(id).expect("track present");
            let (frames, pixels): (Vec<usize>, Vec<Vector2<f64>>) = track.into_iter().unzip();
            let poses: Vec<Pose> = frames.iter().map(|f| self.state.clones[self.state.clone_index(*f).unwrap()].pose).collect();
            let Ok(p_f) = triangulate(&cam, &poses, &pixels, sigma) else { continue };
            let Ok(proj) = project_track(&cam, &self.state, &frames, &pixels, &p_f) else { continue };
            let mut s = &proj.h * &p * proj.h.transpose();
            for k in 0..s.nrows() {
                s[(k, k)] += sigma * sigma;
            }
            let Some(chol) = s.cholesky() else { continue };
            let d2 = proj.r.dot(&chol.solve(&proj.r));
            if d2 > chi2_quantile(proj.r.len(), 0.95) {
                continue;
            }
            hs.push(proj.h);
            rs.push(proj.r);
        }
        for id in drop {
            self.tracks.remove(&id);
        }
        if hs.is_empty() {
            return Ok(0);
        }
        let rows: usize = rs.iter().map(|r| r.len()).sum();
        let d = self.state.dim();
        let mut h = DMatrix::zeros(rows, d);
        let mut r = DVector::zeros(rows);
        let mut o = 0;
        for (hk, rk) in hs.iter().zip(&rs) {
            h.rows_mut(o, hk.nrows()).copy_from(hk);
            r.rows_mut(o, rk.len()).copy_from(rk);
            o += rk.len();
        }
        let (h, r) = compress(h, r);
        let dx = self.backend.local_update(&h, &r, sigma)?;
        self.apply(&dx);
        Ok(hs.len())
    }

    fn marginalize(&mut self) {
        while self.state.clones.len() > self.config.window {
            let gone = self.state.clones[0].frame;
            self.backend.remove_block(self.state.clone_offset(0), CLONE_DIM);
            self.state.clones.pop_front();
            for t in self.tracks.values_mut() {
                t.retain(|(f, _)| *f != gone);
            }
            self.tracks.retain(|_, t| !t.is_empty());
        }
    }

    fn record(&mut self, truth: &TruthState, stats: StepStats) -> FrameRecord {
        let p = self.backend.device_covariance();
        let pc: Matrix3<f64> = p.fixed_view::<3, 3>(POS, POS).into_owned();
        let e = truth.p - self.state.p;
        let nees = pc.try_inverse().map_or(f64::INFINITY, |pi| (e.transpose() * pi * e)[0]);
        let timing = self.config.record_timing;
        let pick = |v: f64| if timing { v } else { 0.0 };
        FrameRecord {
            frame: self.frame - 1,
            t: self.state.t,
            position: self.state.p,
            truth_position: truth.p,
            position_covariance: pc,
            nees_position: nees,
            rotation_error: truth.q.angle_to(&self.state.q),
            device_variances: p.diagonal().rows(0, EVOLVING_DIM).into_owned(),
            local_tracks: stats.local_tracks,
            map_correspondences: stats.map_correspondences,
            initialized_submaps: self.state.transforms.len(),
            propagate_s: pick(stats.propagate_s),
            local_s: pick(stats.local_s),
            map_s: pick(stats.map_s),
            map_updates: std::mem::take(&mut self.map_timings),
        }
    }

    /// Runs the estimator over a whole session and returns one record per
    /// camera frame. Initialization at the first frame's ground truth,
    /// perturbed by the initial covariance unless `exact_start`.
    pub fn run_session(
        config: FilterConfig,
        session: &Session,
        bundle: Option<&'a MapBundle>,
        seed: u64,
        exact_start: bool,
    ) -> Result<(Vec<FrameRecord>, Self), FilterError> {
        let first = session.frames.first().ok_or_else(|| FilterError::Config("session has no frames".into()))?;
        let truth0 = &session.truth[first.imu_index];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_f11e);
        let init = if exact_start { DeviceState::from_truth(truth0) } else { config.initial.sample(truth0, &mut rng) };
        let mut est = Estimator::new(config, bundle, init, seed)?;
        let mut records = Vec::with_capacity(session.frames.len());
        for frame in &session.frames {
            let stats = est.step(&session.imu, frame)?;
            records.push(est.record(&session.truth[frame.imu_index], stats));
        }
        Ok((records, est))
    }
}

/// Gauss-Newton on the transform alone, device pose held fixed.
fn refine_transform(
    cam: &crate::geom::CameraModel,
    device: &Pose,
    mut tau: MapTransform4DoF,
    submap: usize,
    sm: &crate::mapper::Submap,
    obs: &[(Vector2<f64>, usize)],
    sigma: f64,
) -> Option<MapTransform4DoF> {
    for _ in 0..10 {
        let usable: Vec<_> = obs
            .iter()
            .filter(|(_, j)| cam.project(&device.to_body(&tau.apply(&sm.feature_in_map(*j)))).is_ok())
            .copied()
            .collect();
        if usable.len() < 2 {
            return None;
        }
        let b = mapped_batch(cam, device, 6, &tau, None, submap, sm, &usable, sigma).ok()?;
        let dx = b.h_tau.clone().svd(true, true).solve(&b.r, 1e-12).ok()?;
        tau = tau.perturbed(dx[0], &Vec3::new(dx[1], dx[2], dx[3]));
        if dx.amax() < 1e-10 {
            break;
        }
    }
    Some(tau)
}
