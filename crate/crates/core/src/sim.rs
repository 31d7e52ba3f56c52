//! Deterministic synthetic worlds, trajectories, IMU streams and feature
//! observations for mapping and localization sessions.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{exp_so3, quat_from_matrix, rot, yaw_rotation, CameraModel, Mat3, Pose, Vec3};

pub const GRAVITY: f64 = 9.81;

/// Gravity in the world / global frame (z up).
pub fn gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -GRAVITY)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Lissajous,
    WaypointSpline,
}

fn default_imu_rate() -> f64 {
    200.0
}
fn default_cam_rate() -> f64 {
    10.0
}
fn default_revisits() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub duration: f64,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_cam_rate")]
    pub cam_rate: f64,
    #[serde(default = "default_revisits")]
    pub revisit_count: usize,
    /// Phase offset (rad) distinguishing trajectories over the same room.
    #[serde(default)]
    pub phase: f64,
    /// Distance (m) kept between the lissajous path and the walls.
    #[serde(default = "default_margin")]
    pub wall_margin: f64,
    /// Spline waypoints; an empty list generates a zig-zag along the room's x axis.
    #[serde(default)]
    pub waypoints: Vec<[f64; 3]>,
    /// Yaw offset of the optical axis from the direction of travel (spline only).
    #[serde(default)]
    pub heading_offset: f64,
}

fn default_margin() -> f64 {
    1.2
}

impl TrajectorySpec {
    pub fn room(duration: f64, revisit_count: usize) -> Self {
        Self {
            kind: TrajectoryKind::Lissajous,
            room_min: [0.0, 0.0, 0.0],
            room_max: [8.0, 6.0, 3.0],
            duration,
            imu_rate: default_imu_rate(),
            cam_rate: default_cam_rate(),
            revisit_count,
            phase: 0.0,
            wall_margin: default_margin(),
            waypoints: Vec::new(),
            heading_offset: 0.0,
        }
    }

    pub fn corridor(length: f64, duration: f64) -> Self {
        Self {
            kind: TrajectoryKind::WaypointSpline,
            room_min: [0.0, 0.0, 0.0],
            room_max: [length, 4.0, 3.0],
            duration,
            imu_rate: default_imu_rate(),
            cam_rate: default_cam_rate(),
            revisit_count: 1,
            phase: 0.0,
            wall_margin: default_margin(),
            waypoints: Vec::new(),
            heading_offset: 0.6,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.imu_rate > 0.0 && self.cam_rate > 0.0) {
            return bad("rates must be positive");
        }
        let ratio = self.imu_rate / self.cam_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return bad("imu_rate must be an integer multiple of cam_rate");
        }
        if self.revisit_count == 0 {
            return bad("revisit_count must be at least 1");
        }
        if (0..3).any(|i| self.room_max[i] <= self.room_min[i]) {
            return bad("room bounds are empty");
        }
        Ok(())
    }

    pub fn trajectory(&self) -> Result<Trajectory, SimError> {
        self.validate()?;
        let lo = Vec3::from(self.room_min);
        let hi = Vec3::from(self.room_max);
        let traj = match self.kind {
            TrajectoryKind::Lissajous => {
                let center = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                let amp = Vec3::new(
                    (half.x - self.wall_margin).max(0.1),
                    (half.y - self.wall_margin).max(0.1),
                    (half.z - 0.6).clamp(0.0, 0.25),
                );
                Trajectory::Lissajous {
                    center,
                    amp,
                    omega: 2.0 * PI * self.revisit_count as f64 / self.duration,
                    phase: self.phase,
                }
            }
            TrajectoryKind::WaypointSpline => {
                let mut pts: Vec<Vec3> = if self.waypoints.is_empty() {
                    zigzag(&lo, &hi, self.wall_margin)
                } else {
                    self.waypoints.iter().map(|w| Vec3::from(*w)).collect()
                };
                if pts.len() < 2 {
                    return Err(SimError::Config("spline needs at least two waypoints".into()));
                }
                let forward = pts.clone();
                for r in 1..self.revisit_count {
                    let leg: Vec<Vec3> =
                        if r % 2 == 1 { forward.iter().rev().skip(1).copied().collect() } else { forward[1..].to_vec() };
                    pts.extend(leg);
                }
                Trajectory::Spline {
                    segment_time: self.duration / (pts.len() - 1) as f64,
                    points: pts,
                    heading_offset: self.heading_offset,
                    phase: self.phase,
                }
            }
        };
        // Sample to enforce the room-bounds and angular-rate invariants.
        let steps = (self.duration * 20.0).ceil() as usize;
        for k in 0..=steps {
            let t = self.duration * k as f64 / steps as f64;
            let kin = traj.kinematics(t);
            if (0..3).any(|i| kin.p[i] < lo[i] || kin.p[i] > hi[i]) {
                return Err(SimError::Config(format!("trajectory leaves the room at t={t:.2}")));
            }
            if kin.omega.norm() >= 2.0 {
                return Err(SimError::Config(format!("angular rate {:.2} rad/s too high", kin.omega.norm())));
            }
        }
        Ok(traj)
    }
}

fn zigzag(lo: &Vec3, hi: &Vec3, margin: f64) -> Vec<Vec3> {
    let cy = 0.5 * (lo.y + hi.y);
    let cz = 0.5 * (lo.z + hi.z);
    let sway = (0.5 * (hi.y - lo.y) - margin).clamp(0.0, 0.6);
    let (x0, x1) = (lo.x + margin, hi.x - margin);
    let n = (((x1 - x0) / 4.0).ceil() as usize).max(1);
    (0..=n)
        .map(|i| {
            let y = if i % 2 == 0 { cy - sway } else { cy + sway };
            Vec3::new(x0 + (x1 - x0) * i as f64 / n as f64, y, cz)
        })
        .collect()
}

/// True kinematic state at one instant.
#[derive(Debug, Clone, Copy)]
pub struct Kinematics {
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    /// Rotation world → IMU.
    pub q: UnitQuaternion<f64>,
    /// Angular velocity in the IMU frame.
    pub omega: Vec3,
}

/// Analytic trajectories.
#[derive(Debug, Clone)]
pub enum Trajectory {
    Lissajous { center: Vec3, amp: Vec3, omega: f64, phase: f64 },
    Spline { points: Vec<Vec3>, segment_time: f64, heading_offset: f64, phase: f64 },
    /// Level uniform circular motion facing the direction of travel.
    Circle { center: Vec3, radius: f64, rate: f64 },
}

/// Maps the optical axis (body z) onto world x, body x onto −y and body y onto −z.
fn base_rotation() -> Mat3 {
    Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Attitude from yaw/pitch/roll angles and their rates: returns `(q_IG, ω_I)`.
fn attitude(yaw: f64, yaw_rate: f64, pitch: f64, pitch_rate: f64, roll: f64, roll_rate: f64) -> (UnitQuaternion<f64>, Vec3) {
    let rz = yaw_rotation(yaw);
    let ry = rot_y(pitch);
    let r_gi = rz * ry * rot_x(roll) * base_rotation();
    let omega_g = yaw_rate * Vec3::z() + rz * (pitch_rate * Vec3::y()) + rz * ry * (roll_rate * Vec3::x());
    let r_ig = r_gi.transpose();
    (quat_from_matrix(&r_ig), r_ig * omega_g)
}

impl Trajectory {
    pub fn kinematics(&self, t: f64) -> Kinematics {
        match self {
            Trajectory::Lissajous { center, amp, omega, phase } => {
                let w = *omega;
                let freqs = [w, 2.0 * w, 3.0 * w];
                let phases = [*phase, 0.5 * phase + 0.3, 1.1];
                let mut p = *center;
                let mut v = Vec3::zeros();
                let mut a = Vec3::zeros();
                for i in 0..3 {
                    let arg = freqs[i] * t + phases[i];
                    p[i] += amp[i] * arg.sin();
                    v[i] = amp[i] * freqs[i] * arg.cos();
                    a[i] = -amp[i] * freqs[i] * freqs[i] * arg.sin();
                }
                let yaw = phase + w * t + 0.3 * (2.0 * w * t).sin();
                let yaw_rate = w + 0.6 * w * (2.0 * w * t).cos();
                let pitch = 0.08 * (3.0 * w * t).sin();
                let pitch_rate = 0.24 * w * (3.0 * w * t).cos();
                let roll = 0.06 * (5.0 * w * t + 0.4).sin();
                let roll_rate = 0.3 * w * (5.0 * w * t + 0.4).cos();
                let (q, omega) = attitude(yaw, yaw_rate, pitch, pitch_rate, roll, roll_rate);
                Kinematics { p, v, a, q, omega }
            }
            Trajectory::Spline { points, segment_time, heading_offset, phase } => {
                let n = points.len();
                let total = segment_time * (n - 1) as f64;
                let tc = t.clamp(0.0, total);
                let seg = ((tc / segment_time).floor() as usize).min(n - 2);
                let s = (tc - seg as f64 * segment_time) / segment_time;
                let p0 = points[seg.saturating_sub(1)];
                let p1 = points[seg];
                let p2 = points[seg + 1];
                let p3 = points[(seg + 2).min(n - 1)];
                let c1 = 0.5 * (p2 - p0);
                let c2 = 0.5 * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3);
                let c3 = 0.5 * (-p0 + 3.0 * p1 - 3.0 * p2 + p3);
                let p = p1 + c1 * s + c2 * s * s + c3 * s * s * s;
                let inv = 1.0 / segment_time;
                let v = (c1 + 2.0 * c2 * s + 3.0 * c3 * s * s) * inv;
                let a = (2.0 * c2 + 6.0 * c3 * s) * inv * inv;
                let h2 = v.x * v.x + v.y * v.y;
                let yaw = v.y.atan2(v.x) + heading_offset;
                let yaw_rate = if h2 > 1e-12 { (v.x * a.y - v.y * a.x) / h2 } else { 0.0 };
                let w = 2.0 * PI / segment_time.max(1e-3) * 0.25;
                let pitch = 0.05 * (w * t + phase).sin();
                let pitch_rate = 0.05 * w * (w * t + phase).cos();
                let (q, omega) = attitude(yaw, yaw_rate, pitch, pitch_rate, 0.0, 0.0);
                Kinematics { p, v, a, q, omega }
            }
            Trajectory::Circle { center, radius, rate } => {
                let (s, c) = (rate * t).sin_cos();
                let p = center + Vec3::new(radius * c, radius * s, 0.0);
                let v = Vec3::new(-radius * rate * s, radius * rate * c, 0.0);
                let a = Vec3::new(-radius * rate * rate * c, -radius * rate * rate * s, 0.0);
                let (q, omega) = attitude(rate * t + 0.5 * PI, *rate, 0.0, 0.0, 0.0, 0.0);
                Kinematics { p, v, a, q, omega }
            }
        }
    }
}

/// Noise-free IMU readings `(ω_I, specific force)` at time `t`.
pub fn imu_true_rates(traj: &Trajectory, t: f64) -> (Vec3, Vec3) {
    let k = traj.kinematics(t);
    (k.omega, k.q * (k.a - gravity()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Distinctive points that are mapped and later re-localized against.
    Landmark,
    /// Points only ever tracked locally between frames.
    Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldPoint {
    pub id: u32,
    pub position: Vec3,
    pub visibility_radius: f64,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorldFeatures {
    pub points: Vec<WorldPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub landmark_count: usize,
    pub texture_count: usize,
    pub visibility_radius: f64,
}

impl WorldSpec {
    pub fn room(landmarks: usize, texture: usize) -> Self {
        Self {
            room_min: [0.0, 0.0, 0.0],
            room_max: [8.0, 6.0, 3.0],
            landmark_count: landmarks,
            texture_count: texture,
            visibility_radius: 8.0,
        }
    }

    pub fn for_trajectory(spec: &TrajectorySpec, landmarks: usize, texture: usize) -> Self {
        Self { room_min: spec.room_min, room_max: spec.room_max, landmark_count: landmarks, texture_count: texture, visibility_radius: 8.0 }
    }
}

impl WorldFeatures {
    /// Points scattered uniformly (by area) over the four walls.
    pub fn generate(spec: &WorldSpec, seed: u64) -> Result<Self, SimError> {
        if spec.landmark_count + spec.texture_count == 0 {
            return Err(SimError::Config("world has no features".into()));
        }
        let lo = Vec3::from(spec.room_min);
        let hi = Vec3::from(spec.room_max);
        let size = hi - lo;
        if size.iter().any(|s| *s <= 0.0) {
            return Err(SimError::Config("room bounds are empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lx, ly) = (size.x, size.y);
        let perimeter = 2.0 * (lx + ly);
        let inset = 0.02;
        let mut points = Vec::with_capacity(spec.landmark_count + spec.texture_count);
        for i in 0..spec.landmark_count + spec.texture_count {
            let s = rng.random::<f64>() * perimeter;
            let z = lo.z + size.z * (0.05 + 0.9 * rng.random::<f64>());
            let (x, y) = if s < lx {
                (lo.x + s, lo.y + inset)
            } else if s < lx + ly {
                (hi.x - inset, lo.y + s - lx)
            } else if s < 2.0 * lx + ly {
                (hi.x - (s - lx - ly), hi.y - inset)
            } else {
                (lo.x + inset, hi.y - (s - 2.0 * lx - ly))
            };
            points.push(WorldPoint {
                id: i as u32,
                position: Vec3::new(x, y, z),
                visibility_radius: spec.visibility_radius,
                kind: if i < spec.landmark_count { FeatureKind::Landmark } else { FeatureKind::Texture },
            });
        }
        Ok(Self { points })
    }

    pub fn get(&self, id: u32) -> Option<&WorldPoint> {
        self.points.get(id as usize).filter(|p| p.id == id).or_else(|| self.points.iter().find(|p| p.id == id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gyro white noise density (rad/s/√Hz).
    pub gyro_noise: f64,
    /// Accelerometer white noise density (m/s²/√Hz).
    pub accel_noise: f64,
    /// Gyro bias random walk (rad/s²/√Hz).
    pub gyro_walk: f64,
    /// Accelerometer bias random walk (m/s³/√Hz).
    pub accel_walk: f64,
    pub gyro_bias_sigma: f64,
    pub accel_bias_sigma: f64,
    pub pixel_sigma: f64,
    /// Probability that an observation is replaced by a uniform pixel.
    pub outlier_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 1e-3,
            accel_noise: 1e-2,
            gyro_walk: 1e-5,
            accel_walk: 1e-4,
            gyro_bias_sigma: 2e-3,
            accel_bias_sigma: 2e-2,
            pixel_sigma: 1.0,
            outlier_rate: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn noise_free() -> Self {
        Self {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_walk: 0.0,
            accel_walk: 0.0,
            gyro_bias_sigma: 0.0,
            accel_bias_sigma: 0.0,
            pixel_sigma: 0.0,
            outlier_rate: 0.0,
        }
    }

    /// The perfect-map baseline's inflated pixel noise.
    pub const INFLATED_PIXEL_SIGMA: f64 = 7.5;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation {
    pub t: f64,
    pub feature_id: u32,
    pub pixel: Vector2<f64>,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthState {
    pub t: f64,
    /// Rotation world → IMU.
    pub q: UnitQuaternion<f64>,
    pub p: Vec3,
    pub v: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
}

impl TruthState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub t: f64,
    /// Index into the IMU / truth streams at the frame's timestamp.
    pub imu_index: usize,
    pub observations: Vec<FeatureObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub camera: CameraModel,
    pub imu: Vec<ImuSample>,
    pub truth: Vec<TruthState>,
    pub frames: Vec<CameraFrame>,
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Whether a world point is visible from `pose`; returns the exact pixel.
pub fn visible_pixel(camera: &CameraModel, pose: &Pose, point: &WorldPoint) -> Option<Vector2<f64>> {
    let pc = pose.to_body(&point.position);
    if pc.z < 0.1 || pc.norm() > point.visibility_radius {
        return None;
    }
    let uv = camera.project(&pc).ok()?;
    camera.in_image(&uv).then_some(uv)
}

pub fn generate_session(
    spec: &TrajectorySpec,
    world: &WorldFeatures,
    camera: &CameraModel,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Session, SimError> {
    if world.points.is_empty() {
        return Err(SimError::Config("world has no features".into()));
    }
    camera.validate().map_err(SimError::Config)?;
    let traj = spec.trajectory()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / spec.imu_rate;
    let n = (spec.duration * spec.imu_rate).round() as usize;
    let stride = (spec.imu_rate / spec.cam_rate).round() as usize;

    let mut bg = gauss3(&mut rng) * noise.gyro_bias_sigma;
    let mut ba = gauss3(&mut rng) * noise.accel_bias_sigma;
    let mut imu = Vec::with_capacity(n + 1);
    let mut truth = Vec::with_capacity(n + 1);
    let mut frames = Vec::with_capacity(n / stride + 1);
    let g_sd = noise.gyro_noise / dt.sqrt();
    let a_sd = noise.accel_noise / dt.sqrt();
    let gw_sd = noise.gyro_walk * dt.sqrt();
    let aw_sd = noise.accel_walk * dt.sqrt();

    for k in 0..=n {
        let t = k as f64 * dt;
        let kin = traj.kinematics(t);
        let (w, f) = (kin.omega, kin.q * (kin.a - gravity()));
        if k > 0 {
            bg += gauss3(&mut rng) * gw_sd;
            ba += gauss3(&mut rng) * aw_sd;
        }
        imu.push(ImuSample { t, gyro: w + bg + gauss3(&mut rng) * g_sd, accel: f + ba + gauss3(&mut rng) * a_sd });
        truth.push(TruthState { t, q: kin.q, p: kin.p, v: kin.v, bg, ba });
        if k % stride == 0 {
            let pose = Pose::new(kin.q, kin.p);
            let mut observations = Vec::new();
            for point in &world.points {
                let Some(uv) = visible_pixel(camera, &pose, point) else { continue };
                let outlier = noise.outlier_rate > 0.0 && rng.random::<f64>() < noise.outlier_rate;
                let pixel = if outlier {
                    Vector2::new(rng.random::<f64>() * camera.width, rng.random::<f64>() * camera.height)
                } else {
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    uv + Vector2::new(nx, ny) * noise.pixel_sigma
                };
                observations.push(FeatureObservation { t, feature_id: point.id, pixel, is_outlier: outlier });
            }
            frames.push(CameraFrame { t, imu_index: k, observations });
        }
    }
    Ok(Session { camera: *camera, imu, truth, frames })
}

/// Noise on the relative-motion and tilt terms of mapping data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingNoise {
    pub rot_sigma: f64,
    pub pos_sigma: f64,
    pub tilt_sigma: f64,
}

impl Default for MappingNoise {
    fn default() -> Self {
        Self { rot_sigma: 3e-3, pos_sigma: 2e-2, tilt_sigma: 5e-3 }
    }
}

impl MappingNoise {
    pub fn noise_free() -> Self {
        Self { rot_sigma: 0.0, pos_sigma: 0.0, tilt_sigma: 0.0 }
    }
}

/// Relative motion between consecutive keyframes: `dq ≈ R_{i+1} R_iᵀ`,
/// `dp ≈ R_i (p_{i+1} − p_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeMotion {
    pub dq: UnitQuaternion<f64>,
    pub dp: Vec3,
}

/// Input to the mapper: per-keyframe landmark observations, integrated
/// relative motion between keyframes, and a gravity direction per keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingData {
    pub camera: CameraModel,
    pub pixel_sigma: f64,
    pub noise: MappingNoise,
    pub truth_poses: Vec<Pose>,
    pub observations: Vec<Vec<(u32, Vector2<f64>)>>,
    pub odometry: Vec<RelativeMotion>,
    /// Measured gravity-up direction in each keyframe's IMU frame.
    pub tilt: Vec<Vec3>,
}

impl MappingData {
    pub fn from_session(
        session: &Session,
        world: &WorldFeatures,
        pixel_sigma: f64,
        noise: &MappingNoise,
        keyframe_stride: usize,
        seed: u64,
    ) -> Result<Self, SimError> {
        if keyframe_stride == 0 {
            return Err(SimError::Config("keyframe stride must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<&CameraFrame> = session.frames.iter().step_by(keyframe_stride).collect();
        if frames.len() < 2 {
            return Err(SimError::Config("mapping needs at least two keyframes".into()));
        }
        let truth_poses: Vec<Pose> = frames.iter().map(|f| session.truth[f.imu_index].pose()).collect();
        let observations = frames
            .iter()
            .map(|f| {
                f.observations
                    .iter()
                    .filter(|o| !o.is_outlier && world.get(o.feature_id).is_some_and(|p| p.kind == FeatureKind::Landmark))
                    .map(|o| (o.feature_id, o.pixel))
                    .collect()
            })
            .collect();
        let odometry = truth_poses
            .windows(2)
            .map(|w| {
                let dq = exp_so3(&(gauss3(&mut rng) * noise.rot_sigma)) * (w[1].q * w[0].q.inverse());
                let dp = w[0].q * (w[1].p - w[0].p) + gauss3(&mut rng) * noise.pos_sigma;
                RelativeMotion { dq, dp }
            })
            .collect();
        let tilt = truth_poses.iter().map(|p| rot(&p.q) * Vec3::z() + gauss3(&mut rng) * noise.tilt_sigma).collect();
        Ok(Self { camera: session.camera, pixel_sigma, noise: *noise, truth_poses, observations, odometry, tilt })
    }
}

/// Writes `imu.csv`, `obs.csv` and `truth.csv` into `dir`.
pub fn write_session_csv(dir: &Path, session: &Session) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("imu.csv"))?);
    writeln!(f, "t,gx,gy,gz,ax,ay,az")?;
    for s in &session.imu {
        writeln!(f, "{},{},{},{},{},{},{}", s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z)?;
    }
    f.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("obs.csv"))?);
    writeln!(f, "t,feature_id,u,v,is_outlier")?;
    for fr in &session.frames {
        for o in &fr.observations {
            writeln!(f, "{},{},{},{},{}", o.t, o.feature_id, o.pixel.x, o.pixel.y, o.is_outlier as u8)?;
        }
    }
    f.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("truth.csv"))?);
    writeln!(f, "t,qx,qy,qz,qw,px,py,pz,vx,vy,vz")?;
    for s in &session.truth {
        let q = s.q.coords;
        writeln!(f, "{},{},{},{},{},{},{},{},{},{},{}", s.t, q.x, q.y, q.z, q.w, s.p.x, s.p.y, s.p.z, s.v.x, s.v.y, s.v.z)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_rates_are_gravity_only() {
        let traj = Trajectory::Spline {
            points: vec![Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.0, 1.0, 1.0)],
            segment_time: 1.0,
            heading_offset: 0.0,
            phase: -std::f64::consts::FRAC_PI_2,
        };
        // Zero velocity: heading is constant, pitch oscillation is the only motion.
        let k = traj.kinematics(0.0);
        assert_eq!(k.v, Vec3::zeros());
        let (w, f) = imu_true_rates(&traj, 0.0);
        assert!(w.norm() < 1e-15);
        assert!((f - k.q * Vec3::new(0.0, 0.0, GRAVITY)).norm() < 1e-12);
    }

    #[test]
    fn base_rotation_is_proper() {
        let b = base_rotation();
        assert!((b * b.transpose() - Mat3::identity()).norm() < 1e-15);
        assert!((b.determinant() - 1.0).abs() < 1e-15);
        assert_eq!(b * Vec3::z(), Vec3::x());
    }

    #[test]
    fn rates_must_divide() {
        let mut spec = TrajectorySpec::room(10.0, 1);
        spec.cam_rate = 7.0;
        assert!(matches!(spec.validate(), Err(SimError::Config(_))));
        spec.cam_rate = 10.0;
        spec.duration = 0.0;
        assert!(spec.validate().is_err());
    }
}
