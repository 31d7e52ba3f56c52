//! IMU integration of the nominal state together with the error-state
//! transition matrix and the discretized process noise.

use nalgebra::{Quaternion, SMatrix, UnitQuaternion};

use super::state::{DeviceState, BA, BG, EVOLVING_DIM, POS, THETA, VEL};
use super::FilterError;
use crate::geom::{skew, Mat3, Vec3};
use crate::sim::{gravity, ImuSample, NoiseConfig};

pub type Mat15 = SMatrix<f64, EVOLVING_DIM, EVOLVING_DIM>;
type Mat15x12 = SMatrix<f64, EVOLVING_DIM, 12>;

/// Continuous-time IMU noise densities used by the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    pub gyro: f64,
    pub accel: f64,
    pub gyro_walk: f64,
    pub accel_walk: f64,
}

impl From<&NoiseConfig> for ImuNoise {
    fn from(n: &NoiseConfig) -> Self {
        Self { gyro: n.gyro_noise, accel: n.accel_noise, gyro_walk: n.gyro_walk, accel_walk: n.accel_walk }
    }
}

/// Continuous error dynamics `F` at a nominal rotation and bias-corrected rates.
pub fn error_dynamics(r: &Mat3, omega: &Vec3, accel: &Vec3) -> Mat15 {
    let mut f = Mat15::zeros();
    f.fixed_view_mut::<3, 3>(THETA, THETA).copy_from(&(-skew(omega)));
    f.fixed_view_mut::<3, 3>(THETA, BG).copy_from(&Mat3::identity());
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&Mat3::identity());
    f.fixed_view_mut::<3, 3>(VEL, THETA).copy_from(&(r.transpose() * skew(accel)));
    f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-r.transpose()));
    f
}

fn noise_input(r: &Mat3) -> Mat15x12 {
    let mut g = Mat15x12::zeros();
    g.fixed_view_mut::<3, 3>(THETA, 0).copy_from(&Mat3::identity());
    g.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&(-r.transpose()));
    g.fixed_view_mut::<3, 3>(BG, 6).copy_from(&Mat3::identity());
    g.fixed_view_mut::<3, 3>(BA, 9).copy_from(&Mat3::identity());
    g
}

fn rot(q: &Quaternion<f64>) -> Mat3 {
    *UnitQuaternion::new_normalize(*q).to_rotation_matrix().matrix()
}

struct Deriv {
    q: Quaternion<f64>,
    p: Vec3,
    v: Vec3,
    phi: Mat15,
}

fn derivative(q: &Quaternion<f64>, v: &Vec3, phi: &Mat15, omega: &Vec3, accel: &Vec3) -> Deriv {
    let r = rot(q);
    Deriv {
        q: Quaternion::from_imag(-omega) * q * 0.5,
        p: *v,
        v: r.transpose() * accel + gravity(),
        phi: error_dynamics(&r, omega, accel) * phi,
    }
}

/// Rate samples at the interval start, midpoint and end.
fn interval_rates(samples: &[ImuSample], prev: Option<&ImuSample>, k: usize) -> [(Vec3, Vec3); 3] {
    let at = |i: isize| -> Option<&ImuSample> {
        if i < 0 {
            prev
        } else {
            samples.get(i as usize)
        }
    };
    let k = k as isize;
    let (a, b) = (at(k).unwrap(), at(k + 1).unwrap());
    let mid = match (at(k - 1), at(k + 2)) {
        (Some(m), Some(n)) => {
            let w = |f: fn(&ImuSample) -> Vec3| (-f(m) + 9.0 * f(a) + 9.0 * f(b) - f(n)) / 16.0;
            (w(|s| s.gyro), w(|s| s.accel))
        }
        (Some(m), None) => {
            let w = |f: fn(&ImuSample) -> Vec3| (-f(m) + 6.0 * f(a) + 3.0 * f(b)) / 8.0;
            (w(|s| s.gyro), w(|s| s.accel))
        }
        (None, Some(n)) => {
            let w = |f: fn(&ImuSample) -> Vec3| (3.0 * f(a) + 6.0 * f(b) - f(n)) / 8.0;
            (w(|s| s.gyro), w(|s| s.accel))
        }
        (None, None) => ((a.gyro + b.gyro) * 0.5, (a.accel + b.accel) * 0.5),
    };
    [(a.gyro, a.accel), mid, (b.gyro, b.accel)]
}

/// Integrates the nominal evolving state over consecutive IMU samples
/// (`samples[0].t` must equal `state.t`) and returns the interval's
/// transition matrix `Φ` and process noise `Q`. `prev` is the sample just
/// before `samples[0]`, used for higher-order interpolation.
pub fn propagate_nominal(
    state: &mut DeviceState,
    samples: &[ImuSample],
    prev: Option<&ImuSample>,
    noise: &ImuNoise,
) -> Result<(Mat15, Mat15), FilterError> {
    let mut phi_total = Mat15::identity();
    let mut q_total = Mat15::zeros();
    if samples.len() < 2 {
        return Ok((phi_total, q_total));
    }
    if (samples[0].t - state.t).abs() > 1e-9 {
        return Err(FilterError::NonMonotonicTimestamps { previous: state.t, next: samples[0].t });
    }
    if let Some(p) = prev {
        if p.t >= samples[0].t {
            return Err(FilterError::NonMonotonicTimestamps { previous: p.t, next: samples[0].t });
        }
    }
    let mut qc = SMatrix::<f64, 12, 12>::zeros();
    for (i, s) in [noise.gyro, noise.accel, noise.gyro_walk, noise.accel_walk].iter().enumerate() {
        for j in 0..3 {
            qc[(3 * i + j, 3 * i + j)] = s * s;
        }
    }
    let mut q = *state.q.quaternion();
    let (mut p, mut v) = (state.p, state.v);
    for k in 0..samples.len() - 1 {
        let dt = samples[k + 1].t - samples[k].t;
        if dt <= 0.0 {
            return Err(FilterError::NonMonotonicTimestamps { previous: samples[k].t, next: samples[k + 1].t });
        }
        let rates = interval_rates(samples, prev, k);
        let [(w0, a0), (wm, am), (w1, a1)] = rates.map(|(w, a)| (w - state.bg, a - state.ba));
        let g0 = noise_input(&rot(&q));
        let phi0 = Mat15::identity();
        let k1 = derivative(&q, &v, &phi0, &w0, &a0);
        let h2 = 0.5 * dt;
        let k2 = derivative(&(q + k1.q * h2), &(v + k1.v * h2), &(phi0 + k1.phi * h2), &wm, &am);
        let k3 = derivative(&(q + k2.q * h2), &(v + k2.v * h2), &(phi0 + k2.phi * h2), &wm, &am);
        let k4 = derivative(&(q + k3.q * dt), &(v + k3.v * dt), &(phi0 + k3.phi * dt), &w1, &a1);
        let s = dt / 6.0;
        q = (q + (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * s).normalize();
        p += (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * s;
        v += (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) * s;
        let phi = phi0 + (k1.phi + k2.phi * 2.0 + k3.phi * 2.0 + k4.phi) * s;
        let g1 = noise_input(&rot(&q));
        let qk = (phi * g0 * qc * g0.transpose() * phi.transpose() + g1 * qc * g1.transpose()) * (0.5 * dt);
        q_total = phi * q_total * phi.transpose() + qk;
        phi_total = phi * phi_total;
    }
    state.q = UnitQuaternion::new_normalize(q);
    state.p = p;
    state.v = v;
    state.t = samples[samples.len() - 1].t;
    q_total = (q_total + q_total.transpose()) * 0.5;
    Ok((phi_total, q_total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::perturb;
    use crate::sim::{generate_session, NoiseConfig, TrajectorySpec, WorldFeatures, WorldSpec};
    use nalgebra::DVector;

    fn session() -> crate::sim::Session {
        let spec = TrajectorySpec::room(20.0, 1);
        let world = WorldFeatures::generate(&WorldSpec::room(20, 0), 1).unwrap();
        generate_session(&spec, &world, &Default::default(), &NoiseConfig::default(), 2).unwrap()
    }

    fn inject(s: &DeviceState, dx: &DVector<f64>) -> DeviceState {
        let mut out = s.clone();
        out.q = perturb(&s.q, &Vec3::new(dx[0], dx[1], dx[2]));
        out.p += dx.fixed_rows::<3>(POS);
        out.bg += dx.fixed_rows::<3>(BG);
        out.v += dx.fixed_rows::<3>(VEL);
        out.ba += dx.fixed_rows::<3>(BA);
        out
    }

    /// Central differences of the integrator reproduce `Φ`.
    #[test]
    fn transition_matches_integrator_differences() {
        let s = session();
        let start = DeviceState::from_truth(&s.truth[10]);
        let samples = &s.imu[10..31];
        let noise = ImuNoise::from(&NoiseConfig::default());
        let mut end = start.clone();
        let (phi, _) = propagate_nominal(&mut end, samples, Some(&s.imu[9]), &noise).unwrap();
        let eps = 1e-6;
        for i in 0..EVOLVING_DIM {
            let mut dx = DVector::zeros(EVOLVING_DIM);
            dx[i] = eps;
            let mut plus = inject(&start, &dx);
            let mut minus = inject(&start, &(-&dx));
            propagate_nominal(&mut plus, samples, Some(&s.imu[9]), &noise).unwrap();
            propagate_nominal(&mut minus, samples, Some(&s.imu[9]), &noise).unwrap();
            let as_truth = |d: &DeviceState| crate::sim::TruthState { t: d.t, q: d.q, p: d.p, v: d.v, bg: d.bg, ba: d.ba };
            let col = (end.evolving_error(&as_truth(&plus)) - end.evolving_error(&as_truth(&minus))) / (2.0 * eps);
            for r in 0..EVOLVING_DIM {
                let scale = phi[(r, i)].abs().max(1e-3);
                assert!((col[r] - phi[(r, i)]).abs() < 1e-5 * scale.max(1.0), "({r},{i}) fd {} phi {}", col[r], phi[(r, i)]);
            }
        }
    }

    #[test]
    fn noise_free_integration_tracks_truth() {
        let spec = TrajectorySpec::room(20.0, 1);
        let world = WorldFeatures::generate(&WorldSpec::room(20, 0), 1).unwrap();
        let mut s = generate_session(&spec, &world, &Default::default(), &NoiseConfig::noise_free(), 2).unwrap();
        s.imu.truncate(1001);
        s.truth.truncate(1001);
        let mut st = DeviceState::from_truth(&s.truth[0]);
        let noise = ImuNoise::from(&NoiseConfig::default());
        let mut prev = None;
        for w in (0..s.imu.len() - 1).step_by(20) {
            let end = (w + 20).min(s.imu.len() - 1);
            propagate_nominal(&mut st, &s.imu[w..=end], prev, &noise).unwrap();
            prev = Some(&s.imu[end - 1]);
        }
        let last = s.truth.last().unwrap();
        assert!((st.p - last.p).norm() < 1e-6, "{}", (st.p - last.p).norm());
    }

    #[test]
    fn rejects_time_travel() {
        let s = session();
        let mut st = DeviceState::from_truth(&s.truth[5]);
        let noise = ImuNoise::from(&NoiseConfig::default());
        assert!(matches!(
            propagate_nominal(&mut st, &s.imu[3..8], None, &noise),
            Err(FilterError::NonMonotonicTimestamps { .. })
        ));
    }
}
