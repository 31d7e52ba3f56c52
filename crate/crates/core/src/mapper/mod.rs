//! Offline mapping: batch least squares over keyframe poses and anchored
//! landmarks, time-even partitioning into sub-maps, the constrained
//! cooperative-mapping solve, and the map bundle container.

mod bundle;
mod cm;
mod kkt;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::geom::{left_jacobian_inv, log_so3, perturb, rot, skew, CameraModel, Mat3, Pose, Vec3};
use crate::sim::{MappingData, MappingNoise};
use crate::sparse::{cholesky, Ordering, SparseError, SparseLowerTriangular, SparseSymmetric};

pub use bundle::{export_bundle, import_bundle, read_bundle, write_bundle, BundleError, MapBundle, Submap, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use cm::{build_submaps, solve_cm_constrained, solve_cm_with, CmSolution, ConstraintBlocks, QpMethod, SubmapSolution};
pub use kkt::{dense_nullspace_solve, covariance_bound_check, CovarianceBoundReport};

#[derive(Debug, Error)]
pub enum MapperError {
    #[error("not converged after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("rank-deficient Hessian: {0}")]
    RankDeficient(SparseError),
    #[error("too few poses: {0}")]
    TooFewPoses(String),
    #[error("constraint set infeasible: {0}")]
    ConstraintInfeasible(String),
    #[error("invalid mapping data: {0}")]
    InvalidData(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapperConfig {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    /// Information of the first pose's position / yaw prior.
    pub gauge_information: f64,
    pub ordering: Ordering,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self { max_iterations: 60, gradient_tol: 1e-6, gauge_information: 1e6, ordering: Ordering::FillReducing }
    }
}

/// A landmark stored relative to its anchor pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapFeature {
    pub id: u32,
    /// Index of the anchor pose within the (sub-)map.
    pub anchor: usize,
    /// Position in the anchor's IMU-camera frame.
    pub position: Vec3,
}

/// Poses (`q`: map → IMU, `p`: IMU position in the map frame) and anchored
/// features. Error-state layout: pose `i` at `6i` (θ then p), feature `j` at
/// `6·poses + 3j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub poses: Vec<Pose>,
    pub features: Vec<MapFeature>,
}

impl MapEstimate {
    pub fn dim(&self) -> usize {
        6 * self.poses.len() + 3 * self.features.len()
    }

    pub fn pose_offset(&self, i: usize) -> usize {
        6 * i
    }

    pub fn feature_offset(&self, j: usize) -> usize {
        6 * self.poses.len() + 3 * j
    }

    /// Feature `j` expressed in the map frame.
    pub fn feature_in_map(&self, j: usize) -> Vec3 {
        let f = &self.features[j];
        self.poses[f.anchor].to_reference(&f.position)
    }

    pub fn apply(&self, dx: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for (i, pose) in out.poses.iter_mut().enumerate() {
            let o = 6 * i;
            pose.q = perturb(&pose.q, &Vec3::new(dx[o], dx[o + 1], dx[o + 2]));
            pose.p += Vec3::new(dx[o + 3], dx[o + 4], dx[o + 5]);
        }
        let base = 6 * self.poses.len();
        for (j, f) in out.features.iter_mut().enumerate() {
            let o = base + 3 * j;
            f.position += Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        }
        out
    }
}

/// One observation inside a (sub-)map problem.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Obs {
    pub pose: usize,
    pub feature: usize,
    pub pixel: Vector2<f64>,
}

/// The cost of one contiguous keyframe range: reprojection, relative-motion
/// and tilt terms, plus the gauge prior on the range's first pose.
#[derive(Debug, Clone)]
pub struct SubProblem<'a> {
    data: &'a MappingData,
    range: Range<usize>,
    pub(crate) feature_ids: Vec<u32>,
    pub(crate) feature_index: BTreeMap<u32, usize>,
    pub(crate) obs: Vec<Obs>,
    sigma_px: f64,
    noise: MappingNoise,
    gauge_information: f64,
}

/// Linearized cost: value, Hessian `JᵀWJ` and gradient `JᵀWr`.
pub(crate) struct Linearization {
    pub cost: f64,
    pub hessian: SparseSymmetric,
    pub gradient: DVector<f64>,
    pub reprojection_sq: f64,
    /// Observations whose point lies nearer than `MIN_FEATURE_DEPTH` to the camera plane.
    pub shallow: usize,
}

fn effective_noise(data: &MappingData) -> (f64, MappingNoise) {
    let d = MappingNoise::default();
    let pick = |v: f64, fallback: f64| if v > 0.0 { v } else { fallback };
    (
        pick(data.pixel_sigma, 1.0),
        MappingNoise {
            rot_sigma: pick(data.noise.rot_sigma, d.rot_sigma),
            pos_sigma: pick(data.noise.pos_sigma, d.pos_sigma),
            tilt_sigma: pick(data.noise.tilt_sigma, d.tilt_sigma),
        },
    )
}

/// Scatters `w · JᵀJ` and `w · Jᵀr` for a residual whose Jacobian is split
/// into column blocks at the given offsets.
fn accumulate(h: &mut SparseSymmetric, g: &mut DVector<f64>, blocks: &[(usize, DMatrix<f64>)], r: &DVector<f64>, w: f64) {
    for (a, (oa, ja)) in blocks.iter().enumerate() {
        let jtr = ja.transpose() * r * w;
        for k in 0..jtr.len() {
            g[oa + k] += jtr[k];
        }
        for (ob, jb) in blocks.iter().skip(a) {
            let blk = ja.transpose() * jb * w;
            if oa <= ob {
                h.add_block(*oa, *ob, &blk);
            } else {
                h.add_block(*ob, *oa, &blk.transpose());
            }
        }
    }
}

fn dm(m: &Mat3) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

impl<'a> SubProblem<'a> {
    /// Keeps features observed by at least two poses of `range`.
    pub fn new(data: &'a MappingData, range: Range<usize>, config: &MapperConfig) -> Result<Self, MapperError> {
        if range.end > data.truth_poses.len() || range.len() < 2 {
            return Err(MapperError::TooFewPoses(format!("range {range:?} of {} poses", data.truth_poses.len())));
        }
        if data.observations.len() != data.truth_poses.len() || data.odometry.len() + 1 != data.truth_poses.len() {
            return Err(MapperError::InvalidData("observation / odometry counts do not match poses".into()));
        }
        let mut count: BTreeMap<u32, usize> = BTreeMap::new();
        for k in range.clone() {
            let mut seen = BTreeSet::new();
            for (id, _) in &data.observations[k] {
                if seen.insert(*id) {
                    *count.entry(*id).or_default() += 1;
                }
            }
        }
        let poses = dead_reckon(data, range.clone());
        let mut rays: BTreeMap<u32, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
        for k in range.clone() {
            for (id, px) in &data.observations[k] {
                if count.get(id).is_some_and(|c| *c >= 2) && rays.get(id).is_none_or(|r| r.last().unwrap().0 != k - range.start) {
                    rays.entry(*id).or_default().push((k - range.start, *px));
                }
            }
        }
        let feature_ids: Vec<u32> = rays
            .iter()
            .filter(|(_, r)| {
                triangulate_linear(&data.camera, &poses, r).is_some_and(|x| {
                    let bearings: Vec<Vec3> = r.iter().map(|(k, _)| (x - poses[*k].p).normalize()).collect();
                    let parallax = bearings.iter().flat_map(|a| bearings.iter().map(move |b| a.angle(b))).fold(0.0, f64::max);
                    parallax >= MIN_PARALLAX && r.iter().all(|(k, _)| poses[*k].to_body(&x).z >= MIN_ADMIT_DEPTH)
                })
            })
            .map(|(id, _)| *id)
            .collect();
        let feature_index: BTreeMap<u32, usize> = feature_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut obs = Vec::new();
        for k in range.clone() {
            let mut seen = BTreeSet::new();
            for (id, px) in &data.observations[k] {
                if let Some(&j) = feature_index.get(id) {
                    if seen.insert(*id) {
                        obs.push(Obs { pose: k - range.start, feature: j, pixel: *px });
                    }
                }
            }
        }
        let (sigma_px, noise) = effective_noise(data);
        Ok(Self { data, range, feature_ids, feature_index, obs, sigma_px, noise, gauge_information: config.gauge_information })
    }

    pub fn pose_count(&self) -> usize {
        self.range.len()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn dim(&self) -> usize {
        6 * self.pose_count() + 3 * self.feature_count()
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn camera(&self) -> &CameraModel {
        &self.data.camera
    }

    /// Feature indices observed by each pose.
    pub fn visibility(&self) -> Vec<Vec<u32>> {
        let mut vis = vec![Vec::new(); self.pose_count()];
        for o in &self.obs {
            vis[o.pose].push(o.feature as u32);
        }
        vis
    }

    fn gauge_pose(&self) -> Pose {
        self.data.truth_poses[self.range.start]
    }

    /// Dead-reckoned poses from the gauge pose plus linear triangulation.
    pub fn initial_estimate(&self) -> MapEstimate {
        self.estimate_from(dead_reckon(self.data, self.range.clone()), &BTreeMap::new())
    }

    /// Grows the solution by `STAGE_POSES` keyframes at a time, extending each solved prefix by odometry.
    pub fn staged_estimate(&self, config: &MapperConfig) -> MapEstimate {
        let mut solved: Option<MapEstimate> = None;
        let mut end = self.range.start + STAGE_POSES;
        while end < self.range.end {
            if let Ok(p) = SubProblem::new(self.data, self.range.start..end, config) {
                let start = match &solved {
                    Some(prev) => p.extend(prev),
                    None => p.initial_estimate(),
                };
                if let Ok((est, _, _)) = p.optimize(start, config) {
                    solved = Some(est);
                }
            }
            end += STAGE_POSES;
        }
        match &solved {
            Some(prev) => self.extend(prev),
            None => self.initial_estimate(),
        }
    }

    /// Start from a solved prefix: its poses chained onward by odometry, its features kept.
    fn extend(&self, prefix: &MapEstimate) -> MapEstimate {
        let mut poses = prefix.poses.clone();
        for k in self.range.start + poses.len() - 1..self.range.end - 1 {
            let prev = *poses.last().unwrap();
            let m = &self.data.odometry[k];
            poses.push(Pose::new(m.dq * prev.q, prev.p + prev.q.inverse() * m.dp));
        }
        let known = prefix.features.iter().map(|f| (f.id, prefix.poses[f.anchor].to_reference(&f.position))).collect();
        self.estimate_from(poses, &known)
    }

    fn estimate_from(&self, poses: Vec<Pose>, known: &BTreeMap<u32, Vec3>) -> MapEstimate {
        let mut rays: Vec<Vec<(usize, Vector2<f64>)>> = vec![Vec::new(); self.feature_count()];
        for o in &self.obs {
            rays[o.feature].push((o.pose, o.pixel));
        }
        let cam = self.camera();
        let features = rays
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let id = self.feature_ids[j];
                let anchor = r[0].0;
                let in_front = |x: &Vec3| r.iter().all(|(k, _)| poses[*k].to_body(x).z >= MIN_FEATURE_DEPTH);
                let triangulated = || triangulate_linear(cam, &poses, r).filter(in_front);
                let world = known.get(&id).copied().filter(in_front).or_else(triangulated).unwrap_or_else(|| {
                    let n = cam.normalized(&r[0].1);
                    poses[anchor].to_reference(&(Vec3::new(n.x, n.y, 1.0) * 3.0))
                });
                MapFeature { id, anchor, position: poses[anchor].to_body(&world) }
            })
            .collect();
        MapEstimate { poses, features }
    }

    pub(crate) fn linearize(&self, est: &MapEstimate) -> Linearization {
        self.evaluate(est, true)
    }

    #[cfg(test)]
    fn cost(&self, est: &MapEstimate) -> f64 {
        self.evaluate(est, false).cost
    }

    fn cost_and_shallow(&self, est: &MapEstimate) -> (f64, usize) {
        let l = self.evaluate(est, false);
        (l.cost, l.shallow)
    }

    fn evaluate(&self, est: &MapEstimate, jac: bool) -> Linearization {
        let n = est.dim();
        let mut h = SparseSymmetric::new(if jac { n } else { 0 });
        let mut g = DVector::zeros(if jac { n } else { 0 });
        let mut cost = 0.0;
        let mut reproj = 0.0;
        let mut shallow = 0;
        let cam = self.camera();
        let w_px = 1.0 / (self.sigma_px * self.sigma_px);
        let fo = 6 * est.poses.len();

        for o in &self.obs {
            let f = &est.features[o.feature];
            let anchor = &est.poses[f.anchor];
            let pose = &est.poses[o.pose];
            let (pc, same) = if o.pose == f.anchor {
                (f.position, true)
            } else {
                (pose.to_body(&anchor.to_reference(&f.position)), false)
            };
            if pc.z < MIN_FEATURE_DEPTH {
                shallow += 1;
            }
            let Ok(pred) = cam.project(&pc) else {
                continue;
            };
            let r = pred - o.pixel;
            let r2 = r.norm_squared();
            cost += 0.5 * w_px * r2;
            reproj += r2;
            if !jac {
                continue;
            }
            let pi = cam.projection_jacobian(&pc).unwrap();
            let pi = DMatrix::from_column_slice(2, 3, pi.as_slice());
            let rv = DVector::from_column_slice(r.as_slice());
            let fcol = fo + 3 * o.feature;
            if same {
                accumulate(&mut h, &mut g, &[(fcol, pi)], &rv, w_px);
            } else {
                let rk = pose.rot();
                let ra_t = anchor.rot().transpose();
                let blocks = [
                    (6 * o.pose, &pi * dm(&(-skew(&pc)))),
                    (6 * o.pose + 3, &pi * dm(&(-rk))),
                    (6 * f.anchor, &pi * dm(&(rk * ra_t * skew(&f.position)))),
                    (6 * f.anchor + 3, &pi * dm(&rk)),
                    (fcol, &pi * dm(&(rk * ra_t))),
                ];
                accumulate(&mut h, &mut g, &blocks, &rv, w_px);
            }
        }

        let w_rot = 1.0 / self.noise.rot_sigma.powi(2);
        let w_pos = 1.0 / self.noise.pos_sigma.powi(2);
        for i in 0..est.poses.len() - 1 {
            let m = &self.data.odometry[self.range.start + i];
            let (a, b) = (&est.poses[i], &est.poses[i + 1]);
            let e_rot = log_so3(&(b.q * a.q.inverse() * m.dq.inverse()));
            let d = b.p - a.p;
            let e_pos = a.q * d - m.dp;
            cost += 0.5 * (w_rot * e_rot.norm_squared() + w_pos * e_pos.norm_squared());
            if !jac {
                continue;
            }
            let jinv = left_jacobian_inv(&e_rot);
            let dmat = rot(&b.q) * rot(&a.q).transpose();
            accumulate(
                &mut h,
                &mut g,
                &[(6 * i, dm(&(-jinv * dmat))), (6 * (i + 1), dm(&jinv))],
                &DVector::from_column_slice(e_rot.as_slice()),
                w_rot,
            );
            let ra = a.rot();
            accumulate(
                &mut h,
                &mut g,
                &[(6 * i, dm(&(-skew(&(ra * d))))), (6 * i + 3, dm(&(-ra))), (6 * (i + 1) + 3, dm(&ra))],
                &DVector::from_column_slice(e_pos.as_slice()),
                w_pos,
            );
        }

        let w_tilt = 1.0 / self.noise.tilt_sigma.powi(2);
        for (i, pose) in est.poses.iter().enumerate() {
            let up = pose.rot() * Vec3::z();
            let e = up - self.data.tilt[self.range.start + i];
            cost += 0.5 * w_tilt * e.norm_squared();
            if jac {
                accumulate(&mut h, &mut g, &[(6 * i, dm(&(-skew(&up))))], &DVector::from_column_slice(e.as_slice()), w_tilt);
            }
        }

        let prior = self.gauge_pose();
        let p0 = &est.poses[0];
        let e_p = p0.p - prior.p;
        let rel = log_so3(&(p0.q.inverse() * prior.q));
        let e_yaw = rel.z;
        cost += 0.5 * self.gauge_information * (e_p.norm_squared() + e_yaw * e_yaw);
        if jac {
            accumulate(&mut h, &mut g, &[(3, DMatrix::identity(3, 3))], &DVector::from_column_slice(e_p.as_slice()), self.gauge_information);
            let row = -(left_jacobian_inv(&rel) * p0.rot().transpose()).row(2).into_owned();
            accumulate(
                &mut h,
                &mut g,
                &[(0, DMatrix::from_row_slice(1, 3, row.as_slice()))],
                &DVector::from_element(1, e_yaw),
                self.gauge_information,
            );
        }
        Linearization { cost, hessian: h, gradient: g, reprojection_sq: reproj, shallow }
    }

    /// Damped Gauss-Newton from `start` until the gradient norm drops below tolerance.
    pub(crate) fn optimize(&self, start: MapEstimate, config: &MapperConfig) -> Result<(MapEstimate, Linearization, usize), MapperError> {
        let mut est = start;
        let mut lin = self.linearize(&est);
        let mut lambda = 0.0f64;
        for it in 0..config.max_iterations {
            if lin.gradient.norm() < config.gradient_tol {
                return Ok((est, lin, it));
            }
            let mut damped = lin.hessian.clone();
            if lambda > 0.0 {
                for i in 0..damped.dim() {
                    damped.add(i, i, lambda);
                }
            }
            let Ok(g) = cholesky(&damped, config.ordering) else {
                lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
                continue;
            };
            let rhs = DMatrix::from_column_slice(lin.gradient.len(), 1, lin.gradient.as_slice());
            let dx = -g.solve(&rhs).map_err(MapperError::RankDeficient)?.column(0).into_owned();
            let trial = est.apply(&dx);
            let (trial_cost, trial_shallow) = self.cost_and_shallow(&trial);
            if trial_cost <= lin.cost * (1.0 + 1e-12) && trial_shallow <= lin.shallow {
                est = trial;
                lin = self.linearize(&est);
                lambda *= 0.1;
                if lambda < 1e-9 {
                    lambda = 0.0;
                }
                if dx.amax() < 1e-13 {
                    return Ok((est, lin, it + 1));
                }
            } else {
                lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            }
        }
        let gradient_norm = lin.gradient.norm();
        if gradient_norm < config.gradient_tol {
            Ok((est, lin, config.max_iterations))
        } else {
            Err(MapperError::NotConverged { iterations: config.max_iterations, gradient_norm })
        }
    }
}

/// Keyframes added per stage of the initial solve.
const STAGE_POSES: usize = 64;

/// Smallest ray angle (rad) for a feature to enter a map problem.
const MIN_PARALLAX: f64 = 0.0175;

/// Smallest dead-reckoned camera-frame depth (m) of an admitted feature in any observing pose.
const MIN_ADMIT_DEPTH: f64 = 0.5;

/// Depth (m) below which a point counts as at or behind the camera plane.
const MIN_FEATURE_DEPTH: f64 = 0.1;

/// Poses chained from the range's first true pose by the odometry.
fn dead_reckon(data: &MappingData, range: Range<usize>) -> Vec<Pose> {
    let mut poses = vec![data.truth_poses[range.start]];
    for k in range.start..range.end - 1 {
        let prev = *poses.last().unwrap();
        let m = &data.odometry[k];
        poses.push(Pose::new(m.dq * prev.q, prev.p + prev.q.inverse() * m.dp));
    }
    poses
}

/// Linear triangulation from bearing rays; `None` when poorly conditioned.
pub fn triangulate_linear(cam: &CameraModel, poses: &[Pose], rays: &[(usize, Vector2<f64>)]) -> Option<Vec3> {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for (k, px) in rays {
        let n = cam.normalized(px);
        let dir = (poses[*k].q.inverse() * Vec3::new(n.x, n.y, 1.0)).normalize();
        let proj = Mat3::identity() - dir * dir.transpose();
        a += proj;
        b += proj * poses[*k].p;
    }
    let eig = a.symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if min < 1e-6 * max {
        return None;
    }
    a.try_inverse().map(|inv| inv * b)
}

/// Result of a batch least-squares map solve.
#[derive(Debug, Clone)]
pub struct MapSolution {
    pub estimate: MapEstimate,
    pub hessian: SparseSymmetric,
    pub factor: SparseLowerTriangular,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// RMS pixel residual per coordinate over all observations.
    pub reprojection_rms: f64,
    pub visibility: Vec<Vec<u32>>,
}

pub fn build_map_bls(data: &MappingData, config: &MapperConfig) -> Result<MapSolution, MapperError> {
    let problem = SubProblem::new(data, 0..data.truth_poses.len(), config)?;
    solve_problem(&problem, config)
}

pub(crate) fn solve_problem(problem: &SubProblem<'_>, config: &MapperConfig) -> Result<MapSolution, MapperError> {
    let (estimate, lin, iterations) = problem.optimize(problem.staged_estimate(config), config)?;
    let factor = cholesky(&lin.hessian, config.ordering).map_err(MapperError::RankDeficient)?;
    let n_obs = problem.obs.len().max(1);
    Ok(MapSolution {
        reprojection_rms: (lin.reprojection_sq / (2 * n_obs) as f64).sqrt(),
        gradient_norm: lin.gradient.norm(),
        estimate,
        hessian: lin.hessian,
        factor,
        iterations,
        visibility: problem.visibility(),
    })
}

/// Time-even split of the keyframes into `count` contiguous segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmapPartition {
    pub ranges: Vec<Range<usize>>,
    /// Landmark ids kept by each segment (observed at least twice inside it).
    pub features: Vec<BTreeSet<u32>>,
}

impl SubmapPartition {
    /// Ids present in both segment `a` and segment `b`.
    pub fn common(&self, a: usize, b: usize) -> BTreeSet<u32> {
        self.features[a].intersection(&self.features[b]).copied().collect()
    }
}

pub fn partition_submaps(data: &MappingData, count: usize) -> Result<SubmapPartition, MapperError> {
    let n = data.truth_poses.len();
    if count < 2 {
        return Err(MapperError::TooFewPoses(format!("sub-map count {count} must be at least 2")));
    }
    if n < 2 * count {
        return Err(MapperError::TooFewPoses(format!("{n} poses cannot form {count} sub-maps")));
    }
    let ranges: Vec<Range<usize>> = (0..count).map(|i| (i * n / count)..((i + 1) * n / count)).collect();
    let config = MapperConfig::default();
    let features = ranges
        .iter()
        .map(|r| SubProblem::new(data, r.clone(), &config).map(|p| p.feature_ids.iter().copied().collect()))
        .collect::<Result<_, _>>()?;
    Ok(SubmapPartition { ranges, features })
}
