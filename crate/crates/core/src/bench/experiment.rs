//! Monte Carlo experiments: one simulated world, mapping session and
//! localization session per seed, shared by every estimator mode.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{anees_bounds, average_nees, median, rmse, MetricsError};
use crate::filter::{Estimator, EstimatorMode, FilterConfig, FilterError, FrameRecord, GateStats};
use crate::geom::{CameraModel, Vec3};
use crate::mapper::{build_submaps, MapBundle, MapperConfig, MapperError};
use crate::sim::{generate_session, MappingData, MappingNoise, NoiseConfig, Session, SimError, TrajectorySpec, WorldFeatures, WorldSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid experiment: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModeSpec {
    Cskf,
    Scskf { submaps: usize },
    Inflated { sigma: f64 },
    Nomap,
    Oracle,
}

impl ModeSpec {
    pub fn estimator_mode(&self) -> EstimatorMode {
        match *self {
            ModeSpec::Cskf => EstimatorMode::Cskf,
            ModeSpec::Scskf { .. } => EstimatorMode::Scskf,
            ModeSpec::Inflated { sigma } => EstimatorMode::Inflated { sigma },
            ModeSpec::Nomap => EstimatorMode::NoMap,
            ModeSpec::Oracle => EstimatorMode::DenseOracle,
        }
    }

    /// Number of sub-maps the mode localizes against (0 without a map).
    pub fn submaps(&self) -> usize {
        match *self {
            ModeSpec::Scskf { submaps } => submaps,
            ModeSpec::Nomap => 0,
            _ => 1,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            ModeSpec::Scskf { submaps } => format!("scskf-l{submaps}"),
            m => m.estimator_mode().label().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSettings {
    pub window: usize,
    pub max_local_tracks: usize,
    pub max_map_correspondences: usize,
    pub injection_rate: f64,
    /// Start from the true state instead of a draw from the prior.
    pub exact_start: bool,
}

impl Default for FilterSettings {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            window: f.window,
            max_local_tracks: f.max_local_tracks,
            max_map_correspondences: f.max_map_correspondences,
            injection_rate: 0.0,
            exact_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub modes: Vec<ModeSpec>,
    pub world: WorldSpec,
    pub mapping: TrajectorySpec,
    pub localization: TrajectorySpec,
    pub keyframe_stride: usize,
    pub noise: NoiseConfig,
    pub mapping_noise: MappingNoise,
    pub filter: FilterSettings,
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut localization = TrajectorySpec::room(40.0, 2);
        localization.phase = 0.9;
        Self {
            name: "desk".into(),
            seeds: (1..=5).collect(),
            modes: vec![
                ModeSpec::Cskf,
                ModeSpec::Scskf { submaps: 2 },
                ModeSpec::Inflated { sigma: NoiseConfig::INFLATED_PIXEL_SIGMA },
                ModeSpec::Nomap,
            ],
            world: WorldSpec::room(120, 400),
            mapping: TrajectorySpec::room(20.0, 1),
            localization,
            keyframe_stride: 5,
            noise: NoiseConfig::default(),
            mapping_noise: MappingNoise { rot_sigma: 6e-3, pos_sigma: 4e-2, tilt_sigma: 1e-2 },
            filter: FilterSettings::default(),
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("no seeds".into()));
        }
        if self.modes.is_empty() {
            return Err(ExperimentError::Config("no modes".into()));
        }
        if self.keyframe_stride == 0 {
            return Err(ExperimentError::Config("keyframe stride must be positive".into()));
        }
        if self.modes.iter().any(|m| matches!(m, ModeSpec::Scskf { submaps: 0 })) {
            return Err(ExperimentError::Config("sub-map count must be positive".into()));
        }
        if self.modes.iter().any(|m| matches!(*m, ModeSpec::Inflated { sigma } if !(sigma > 0.0))) {
            return Err(ExperimentError::Config("inflated pixel sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.filter.injection_rate) {
            return Err(ExperimentError::Config("injection rate must lie in [0, 1]".into()));
        }
        self.mapping.validate()?;
        self.localization.validate()?;
        Ok(())
    }

    pub fn filter_config(&self, mode: &ModeSpec) -> FilterConfig {
        let mut f = FilterConfig {
            mode: mode.estimator_mode(),
            window: self.filter.window,
            pixel_sigma: self.noise.pixel_sigma.max(1e-3),
            max_local_tracks: self.filter.max_local_tracks,
            max_map_correspondences: self.filter.max_map_correspondences,
            record_timing: self.record_timing,
            ..FilterConfig::default()
        };
        f.imu.gyro = self.noise.gyro_noise;
        f.imu.accel = self.noise.accel_noise;
        f.imu.gyro_walk = self.noise.gyro_walk;
        f.imu.accel_walk = self.noise.accel_walk;
        f.initial.gyro_bias = self.noise.gyro_bias_sigma.max(1e-6);
        f.initial.accel_bias = self.noise.accel_bias_sigma.max(1e-6);
        f.matcher.injection_rate = self.filter.injection_rate;
        f
    }
}

/// Everything generated once per seed.
pub struct SeedWorld {
    pub seed: u64,
    pub world: WorldFeatures,
    pub session: Session,
    /// Map bundles keyed by sub-map count.
    pub maps: BTreeMap<usize, MapBundle>,
}

impl ExperimentConfig {
    pub fn world_features(&self, seed: u64) -> Result<WorldFeatures> {
        Ok(WorldFeatures::generate(&self.world, seed)?)
    }

    pub fn mapping_session(&self, world: &WorldFeatures, seed: u64) -> Result<Session> {
        Ok(generate_session(&self.mapping, world, &CameraModel::default(), &self.noise, seed.wrapping_mul(3) + 1)?)
    }

    pub fn mapping_data(&self, world: &WorldFeatures, seed: u64) -> Result<MappingData> {
        let mapping = self.mapping_session(world, seed)?;
        Ok(MappingData::from_session(
            &mapping,
            world,
            self.noise.pixel_sigma,
            &self.mapping_noise,
            self.keyframe_stride,
            seed.wrapping_mul(3) + 2,
        )?)
    }

    pub fn build_map(&self, data: &MappingData, submaps: usize) -> Result<MapBundle> {
        let parts = build_submaps(data, submaps, &MapperConfig::default())?;
        Ok(MapBundle::from_submaps(parts, CameraModel::default(), self.noise.pixel_sigma))
    }

    pub fn localization_session(&self, world: &WorldFeatures, seed: u64) -> Result<Session> {
        Ok(generate_session(&self.localization, world, &CameraModel::default(), &self.noise, seed.wrapping_mul(3) + 3)?)
    }
}

impl SeedWorld {
    pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let world = config.world_features(seed)?;
        let data = config.mapping_data(&world, seed)?;
        let mut maps = BTreeMap::new();
        for m in &config.modes {
            let l = m.submaps();
            if l > 0 && !maps.contains_key(&l) {
                maps.insert(l, config.build_map(&data, l)?);
            }
        }
        let session = config.localization_session(&world, seed)?;
        Ok(Self { seed, world, session, maps })
    }

    /// Like [`SeedWorld::prepare`] but with a map supplied from outside.
    pub fn with_map(config: &ExperimentConfig, seed: u64, bundle: MapBundle) -> Result<Self> {
        let world = config.world_features(seed)?;
        let session = config.localization_session(&world, seed)?;
        let maps = BTreeMap::from([(bundle.submaps.len(), bundle)]);
        Ok(Self { seed, world, session, maps })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub submaps: usize,
    pub frames: usize,
    pub rmse_position: f64,
    pub mean_nees_position: f64,
    pub final_position_error: f64,
    pub initialized_submaps: usize,
    pub map_correspondences: usize,
    pub local_tracks: usize,
    pub map_dim: usize,
    pub map_nnz: Vec<usize>,
    pub belief_bytes: usize,
    pub gate_inliers_tested: usize,
    pub gate_inliers_accepted: usize,
    pub gate_outliers_tested: usize,
    pub gate_outliers_rejected: usize,
    /// Mean seconds per frame; zero unless timing is recorded.
    pub propagate_s: f64,
    pub local_s: f64,
    pub map_s: f64,
    /// Mean seconds per individual map-based update.
    pub map_update_s: f64,
    #[serde(skip)]
    pub records: Vec<FrameRecord>,
    #[serde(skip)]
    pub gate: GateStats,
}

impl RunReport {
    pub fn nees(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.nees_position).collect()
    }

    fn from_records(mode: &ModeSpec, seed: u64, bundle: Option<&MapBundle>, records: Vec<FrameRecord>, est: &Estimator) -> Self {
        let errors: Vec<Vec3> = records.iter().map(|r| r.position - r.truth_position).collect();
        let n = records.len().max(1) as f64;
        let updates: Vec<f64> = records.iter().flat_map(|r| r.map_updates.iter().map(|u| u.seconds)).collect();
        let gate = est.gate_stats;
        Self {
            mode: mode.label(),
            seed,
            submaps: mode.submaps(),
            frames: records.len(),
            rmse_position: rmse(&errors),
            mean_nees_position: records.iter().map(|r| r.nees_position).sum::<f64>() / n,
            final_position_error: errors.last().map_or(0.0, |e| e.norm()),
            initialized_submaps: records.last().map_or(0, |r| r.initialized_submaps),
            map_correspondences: records.iter().map(|r| r.map_correspondences).sum(),
            local_tracks: records.iter().map(|r| r.local_tracks).sum(),
            map_dim: bundle.map_or(0, MapBundle::total_dim),
            map_nnz: bundle.map_or_else(Vec::new, |b| b.submaps.iter().map(|s| s.factor.nnz()).collect()),
            belief_bytes: est.backend.storage_bytes(),
            gate_inliers_tested: gate.inliers_tested,
            gate_inliers_accepted: gate.inliers_accepted,
            gate_outliers_tested: gate.outliers_tested,
            gate_outliers_rejected: gate.outliers_rejected,
            propagate_s: records.iter().map(|r| r.propagate_s).sum::<f64>() / n,
            local_s: records.iter().map(|r| r.local_s).sum::<f64>() / n,
            map_s: records.iter().map(|r| r.map_s).sum::<f64>() / n,
            map_update_s: if updates.is_empty() { 0.0 } else { updates.iter().sum::<f64>() / updates.len() as f64 },
            records,
            gate,
        }
    }
}

pub fn run_mode(config: &ExperimentConfig, world: &SeedWorld, mode: &ModeSpec) -> Result<RunReport> {
    let bundle = match mode.submaps() {
        0 => None,
        l => Some(world.maps.get(&l).ok_or_else(|| ExperimentError::Config(format!("no {l}-sub-map bundle prepared")))?),
    };
    let (records, est) =
        Estimator::run_session(config.filter_config(mode), &world.session, bundle, world.seed, config.filter.exact_start)?;
    Ok(RunReport::from_records(mode, world.seed, bundle, records, &est))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub runs: usize,
    pub median_rmse: f64,
    pub average_nees: f64,
    pub nees_lower: f64,
    pub nees_upper: f64,
    pub gate_inlier_acceptance: f64,
    pub gate_outlier_rejection: f64,
}

/// Version of the `summary.json` layout. Fields are only ever added.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub summaries: Vec<ModeSummary>,
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn summary(&self, label: &str) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == label)
    }
}

pub fn summarize(label: &str, runs: &[&RunReport]) -> Result<ModeSummary> {
    let series: Vec<Vec<f64>> = runs.iter().map(|r| r.nees()).collect();
    let (lo, hi) = anees_bounds(3, runs.len());
    let mut gate = GateStats::default();
    for r in runs {
        gate.merge(&r.gate);
    }
    Ok(ModeSummary {
        mode: label.to_string(),
        runs: runs.len(),
        median_rmse: median(&runs.iter().map(|r| r.rmse_position).collect::<Vec<_>>()),
        average_nees: average_nees(&series)?,
        nees_lower: lo,
        nees_upper: hi,
        gate_inlier_acceptance: gate.inlier_acceptance(),
        gate_outlier_rejection: gate.outlier_rejection(),
    })
}

/// Worker threads for seed fan-out: `CSKF_THREADS` if set, else rayon's
/// default.
pub fn thread_count() -> usize {
    std::env::var("CSKF_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or_else(rayon::current_num_threads)
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<RunReport>> {
    let world = SeedWorld::prepare(config, seed)?;
    config.modes.iter().map(|mode| run_mode(config, &world, mode)).collect()
}

/// Runs every mode on every seed, seeds in parallel. Results come back in
/// seed order regardless of thread count; `progress` sees each run in
/// that order.
pub fn run_experiment(config: &ExperimentConfig, mut progress: impl FnMut(&RunReport)) -> Result<ExperimentReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let per_seed: Vec<Result<Vec<RunReport>>> =
        pool.install(|| config.seeds.par_iter().map(|&seed| run_seed(config, seed)).collect());
    let mut runs = Vec::new();
    for batch in per_seed {
        for r in batch? {
            progress(&r);
            runs.push(r);
        }
    }
    assemble_report(config, runs)
}

/// Summarizes finished runs per configured mode.
pub fn assemble_report(config: &ExperimentConfig, runs: Vec<RunReport>) -> Result<ExperimentReport> {
    let mut summaries = Vec::new();
    for mode in &config.modes {
        let label = mode.label();
        let mine: Vec<&RunReport> = runs.iter().filter(|r| r.mode == label).collect();
        summaries.push(summarize(&label, &mine)?);
    }
    Ok(ExperimentReport { schema_version: REPORT_SCHEMA_VERSION, name: config.name.clone(), summaries, runs })
}

/// Writes `summary.json` and one `<mode>_seed<seed>.csv` per run.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut f, report)?;
    writeln!(f)?;
    for r in &report.runs {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{}_seed{}.csv", r.mode, r.seed)))?);
        writeln!(f, "t,x,y,z,true_x,true_y,true_z,sigma_x,sigma_y,sigma_z,nees,rotation_error,map_correspondences")?;
        for k in &r.records {
            let s = k.position_covariance.diagonal().map(f64::sqrt);
            writeln!(
                f,
                "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                k.t,
                k.position.x,
                k.position.y,
                k.position.z,
                k.truth_position.x,
                k.truth_position.y,
                k.truth_position.z,
                s.x,
                s.y,
                s.z,
                k.nees_position,
                k.rotation_error,
                k.map_correspondences
            )?;
        }
    }
    Ok(())
}
