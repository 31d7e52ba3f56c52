//! The online estimator: IMU propagation, clone window, MSCKF local updates,
//! map-transform initialization and factorized map-based updates, plus dense
//! joint-covariance oracles.

mod belief;
mod dense;
mod estimator;
mod msckf;
mod propagation;
mod state;

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::geom::{mapped_feature_jacobians, CameraModel, GeomError, MapTransform4DoF, Pose};
use crate::mapper::Submap;
use crate::sparse::SparseError;

pub use belief::{whitened_map_jacobian, BeliefDiagnostics, FilterBelief, MAX_INIT_CONDITION};
pub use dense::{dense_ekf_update, dense_skf_update, DenseJoint, DenseUpdate};
pub use estimator::{
    Backend, Estimator, EstimatorMode, FilterConfig, FrameRecord, GateStats, InitialUncertainty, MapUpdateTiming,
};
pub use msckf::{chi2_quantile, compress, left_null_space, project_track, triangulate, ProjectedTrack};
pub use propagation::{error_dynamics, propagate_nominal, ImuNoise, Mat15};
pub use state::{ClonePose, DeviceState, BA, BG, CLONE_DIM, EVOLVING_DIM, POS, THETA, TRANSFORM_DIM, VEL};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("timestamps not increasing ({previous} then {next})")]
    NonMonotonicTimestamps { previous: f64, next: f64 },
    #[error("innovation covariance not positive definite")]
    SingularInnovation,
    #[error("triangulation failed: {0}")]
    TriangulationFailed(&'static str),
    #[error("Mahalanobis test rejected the measurement (d² = {distance})")]
    MahalanobisReject { distance: f64 },
    #[error("map transform {0} not initialized")]
    TransformNotInitialized(usize),
    #[error("map transform {0} already initialized")]
    AlreadyInitialized(usize),
    #[error("{found} mapped features found, {required} required")]
    InsufficientFeatures { found: usize, required: usize },
    #[error("degenerate geometry (condition number {condition:e})")]
    DegenerateGeometry { condition: f64 },
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Stacked mapped-feature measurements against one sub-map.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub submap: usize,
    pub r: DVector<f64>,
    /// Device-state Jacobian (current pose and the sub-map's transform).
    pub h_r: DMatrix<f64>,
    pub h_m: DMatrix<f64>,
    /// `(δyaw, δt)` columns, kept separately for transform initialization.
    pub h_tau: DMatrix<f64>,
    pub sigma: f64,
}

impl MeasurementBatch {
    pub fn rows(&self) -> usize {
        self.r.len()
    }

    /// Rows `2k..2k+2` of measurement `k` only.
    pub fn single(&self, k: usize) -> Self {
        Self {
            submap: self.submap,
            r: self.r.rows(2 * k, 2).into_owned(),
            h_r: self.h_r.rows(2 * k, 2).into_owned(),
            h_m: self.h_m.rows(2 * k, 2).into_owned(),
            h_tau: self.h_tau.rows(2 * k, 2).into_owned(),
            sigma: self.sigma,
        }
    }

    pub fn select(&self, keep: &[usize]) -> Self {
        let rows: Vec<usize> = keep.iter().flat_map(|k| [2 * k, 2 * k + 1]).collect();
        Self {
            submap: self.submap,
            r: self.r.select_rows(&rows),
            h_r: self.h_r.select_rows(&rows),
            h_m: self.h_m.select_rows(&rows),
            h_tau: self.h_tau.select_rows(&rows),
            sigma: self.sigma,
        }
    }
}

/// Linearizes observations `(pixel, feature index)` of sub-map `submap` at
/// the current state. `transform_offset` is `None` before the transform is
/// part of the state, in which case `h_r` has no transform columns and
/// `guess` supplies the linearization point.
#[allow(clippy::too_many_arguments)]
pub fn mapped_batch(
    cam: &CameraModel,
    device: &Pose,
    device_dim: usize,
    transform: &MapTransform4DoF,
    transform_offset: Option<usize>,
    submap_index: usize,
    submap: &Submap,
    observations: &[(Vector2<f64>, usize)],
    sigma: f64,
) -> Result<MeasurementBatch, FilterError> {
    let m = observations.len();
    let mut b = MeasurementBatch {
        submap: submap_index,
        r: DVector::zeros(2 * m),
        h_r: DMatrix::zeros(2 * m, device_dim),
        h_m: DMatrix::zeros(2 * m, submap.dim()),
        h_tau: DMatrix::zeros(2 * m, TRANSFORM_DIM),
        sigma,
    };
    for (k, (z, j)) in observations.iter().enumerate() {
        let f = &submap.features[*j];
        let jac = mapped_feature_jacobians(cam, device, transform, &submap.poses[f.anchor], &f.position)?;
        let row = 2 * k;
        b.r.rows_mut(row, 2).copy_from(&(z - jac.predicted));
        b.h_r.view_mut((row, THETA), (2, 3)).copy_from(&jac.d_theta);
        b.h_r.view_mut((row, POS), (2, 3)).copy_from(&jac.d_position);
        b.h_tau.view_mut((row, 0), (2, 1)).copy_from(&jac.d_yaw);
        b.h_tau.view_mut((row, 1), (2, 3)).copy_from(&jac.d_translation);
        if let Some(o) = transform_offset {
            let tau = b.h_tau.rows(row, 2).into_owned();
            b.h_r.view_mut((row, o), (2, TRANSFORM_DIM)).copy_from(&tau);
        }
        let po = submap.pose_offsets[f.anchor];
        b.h_m.view_mut((row, po), (2, 3)).copy_from(&jac.d_anchor_theta);
        b.h_m.view_mut((row, po + 3), (2, 3)).copy_from(&jac.d_anchor_position);
        b.h_m.view_mut((row, submap.feature_offsets[*j]), (2, 3)).copy_from(&jac.d_feature);
    }
    Ok(b)
}
