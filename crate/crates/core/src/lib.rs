//! Consistent map-based visual-inertial localization.
//!
//! The estimator keeps the prior map's uncertainty as the sparse Cholesky
//! factor `G` of the map Hessian and stores device-map cross-covariance as a
//! dense factor `Γ` with `P_RM = Γ G⁻¹`, so map memory stays proportional to
//! `nnz(G)` and the map itself is never modified.

pub mod bench;
pub mod filter;
pub mod geom;
pub mod mapper;
pub mod matcher;
pub mod sim;
pub mod sparse;
