use std::collections::VecDeque;

use nalgebra::{DVector, UnitQuaternion};

use crate::geom::{perturb, MapTransform4DoF, Pose, Vec3};
use crate::sim::TruthState;

/// Size of the evolving error state `(δθ, δp, δb_g, δv, δb_a)`.
pub const EVOLVING_DIM: usize = 15;
pub const CLONE_DIM: usize = 6;
pub const TRANSFORM_DIM: usize = 4;

pub const THETA: usize = 0;
pub const POS: usize = 3;
pub const BG: usize = 6;
pub const VEL: usize = 9;
pub const BA: usize = 12;

/// A cloned IMU pose in the sliding window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClonePose {
    /// Camera frame number the clone was taken at.
    pub frame: usize,
    pub t: f64,
    pub pose: Pose,
}

/// Nominal device state. Error-state layout: evolving block, then one
/// 4-vector `(δyaw, δt)` per initialized map transform (in initialization
/// order), then 6 entries `(δθ, δp)` per clone, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub t: f64,
    /// Rotation global → IMU.
    pub q: UnitQuaternion<f64>,
    pub p: Vec3,
    pub v: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
    pub clones: VecDeque<ClonePose>,
    /// `(sub-map index, transform)` in state order.
    pub transforms: Vec<(usize, MapTransform4DoF)>,
}

impl DeviceState {
    pub fn from_truth(truth: &TruthState) -> Self {
        Self {
            t: truth.t,
            q: truth.q,
            p: truth.p,
            v: truth.v,
            bg: truth.bg,
            ba: truth.ba,
            clones: VecDeque::new(),
            transforms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        EVOLVING_DIM + TRANSFORM_DIM * self.transforms.len() + CLONE_DIM * self.clones.len()
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }

    pub fn transform_slot(&self, submap: usize) -> Option<usize> {
        self.transforms.iter().position(|(s, _)| *s == submap)
    }

    pub fn transform(&self, submap: usize) -> Option<MapTransform4DoF> {
        self.transforms.iter().find(|(s, _)| *s == submap).map(|(_, t)| *t)
    }

    pub fn transform_offset(&self, slot: usize) -> usize {
        EVOLVING_DIM + TRANSFORM_DIM * slot
    }

    pub fn clone_offset(&self, index: usize) -> usize {
        EVOLVING_DIM + TRANSFORM_DIM * self.transforms.len() + CLONE_DIM * index
    }

    /// Index of the clone taken at `frame`.
    pub fn clone_index(&self, frame: usize) -> Option<usize> {
        self.clones.iter().position(|c| c.frame == frame)
    }

    /// Injects an error-state correction.
    pub fn apply(&mut self, dx: &DVector<f64>) {
        debug_assert_eq!(dx.len(), self.dim());
        let v3 = |o: usize| Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        self.q = perturb(&self.q, &v3(THETA));
        self.p += v3(POS);
        self.bg += v3(BG);
        self.v += v3(VEL);
        self.ba += v3(BA);
        for slot in 0..self.transforms.len() {
            let o = self.transform_offset(slot);
            let t = &mut self.transforms[slot].1;
            *t = t.perturbed(dx[o], &v3(o + 1));
        }
        for i in 0..self.clones.len() {
            let o = self.clone_offset(i);
            let c = &mut self.clones[i].pose;
            c.q = perturb(&c.q, &v3(o));
            c.p += v3(o + 3);
        }
    }

    /// Error `truth ⊟ estimate` of the evolving block.
    pub fn evolving_error(&self, truth: &TruthState) -> DVector<f64> {
        let mut e = DVector::zeros(EVOLVING_DIM);
        let dq = truth.q * self.q.inverse();
        e.fixed_rows_mut::<3>(THETA).copy_from(&dq.scaled_axis());
        e.fixed_rows_mut::<3>(POS).copy_from(&(truth.p - self.p));
        e.fixed_rows_mut::<3>(BG).copy_from(&(truth.bg - self.bg));
        e.fixed_rows_mut::<3>(VEL).copy_from(&(truth.v - self.v));
        e.fixed_rows_mut::<3>(BA).copy_from(&(truth.ba - self.ba));
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets() {
        let mut s = DeviceState::from_truth(&TruthState {
            t: 0.0,
            q: UnitQuaternion::identity(),
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            bg: Vec3::zeros(),
            ba: Vec3::zeros(),
        });
        s.transforms.push((1, MapTransform4DoF::identity()));
        for f in 0..3 {
            s.clones.push_back(ClonePose { frame: f, t: 0.0, pose: Pose::identity() });
        }
        assert_eq!(s.dim(), 15 + 4 + 18);
        assert_eq!(s.transform_offset(0), 15);
        assert_eq!(s.clone_offset(2), 15 + 4 + 12);
        assert_eq!(s.clone_index(2), Some(2));
        let mut dx = DVector::zeros(s.dim());
        dx[15] = 0.1;
        dx[s.clone_offset(1) + 3] = 2.0;
        s.apply(&dx);
        assert!((s.transform(1).unwrap().yaw - 0.1).abs() < 1e-15);
        assert_eq!(s.clones[1].pose.p.x, 2.0);
    }
}
