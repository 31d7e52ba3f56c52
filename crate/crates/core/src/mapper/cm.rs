//! Cooperative mapping: two sub-map costs joined by common-feature equality
//! constraints and a 4-d.o.f. inter-map transform, solved by sequential
//! quadratic programming on the KKT system.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::kkt::dense_nullspace_solve;
use super::{solve_problem, MapEstimate, MapSolution, MapperConfig, MapperError, SubProblem, SubmapPartition};
use crate::geom::{skew, MapTransform4DoF, Mat3, Vec3};
use crate::sim::MappingData;
use crate::sparse::{cholesky, SparseLowerTriangular, SparseSymmetric};

/// Linearized common-feature constraints `c + A₁ dx₁ + A₂ dx₂ + B dτ = 0`
/// with `c_j = f_j^α − (R_z(φ) f_j^β + t)` in the first sub-map's frame.
#[derive(Debug, Clone)]
pub struct ConstraintBlocks {
    pub c: DVector<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Which linear algebra solves each SQP subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMethod {
    /// Sparse factorizations of each sub-map Hessian plus a small dense
    /// multiplier system.
    RangeSpace,
    /// Dense projection onto the constraint null space (reference).
    DenseNullSpace,
}

#[derive(Debug, Clone)]
pub struct CmSolution {
    pub ranges: [Range<usize>; 2],
    pub estimates: [MapEstimate; 2],
    /// Hessian of each sub-map's own cost at the constrained solution.
    pub hessians: [SparseSymmetric; 2],
    pub factors: [SparseLowerTriangular; 2],
    pub visibility: [Vec<Vec<u32>>; 2],
    /// Maps the second sub-map's frame into the first's.
    pub transform: MapTransform4DoF,
    pub common: Vec<u32>,
    pub constraints: ConstraintBlocks,
    pub constraint_violation: f64,
    pub iterations: usize,
}

fn put(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Mat3) {
    m.view_mut((r, c), (3, 3)).copy_from(b);
}

fn constraints(
    pa: &SubProblem<'_>,
    ea: &MapEstimate,
    pb: &SubProblem<'_>,
    eb: &MapEstimate,
    tau: &MapTransform4DoF,
    common: &[u32],
) -> ConstraintBlocks {
    let m = 3 * common.len();
    let mut c = DVector::zeros(m);
    let mut a1 = DMatrix::zeros(m, ea.dim());
    let mut a2 = DMatrix::zeros(m, eb.dim());
    let mut b = DMatrix::zeros(m, 4);
    let rz = tau.rotation();
    for (k, id) in common.iter().enumerate() {
        let (ja, jb) = (pa.feature_index[id], pb.feature_index[id]);
        let (fa, fb) = (&ea.features[ja], &eb.features[jb]);
        let (posa, posb) = (&ea.poses[fa.anchor], &eb.poses[fb.anchor]);
        let xa = posa.to_reference(&fa.position);
        let xb = posb.to_reference(&fb.position);
        let r = 3 * k;
        let ck = xa - tau.apply(&xb);
        c.rows_mut(r, 3).copy_from(&ck);
        let raa_t = posa.rot().transpose();
        put(&mut a1, r, ea.pose_offset(fa.anchor), &(raa_t * skew(&fa.position)));
        put(&mut a1, r, ea.pose_offset(fa.anchor) + 3, &Mat3::identity());
        put(&mut a1, r, ea.feature_offset(ja), &raa_t);
        let rab_t = rz * posb.rot().transpose();
        put(&mut a2, r, eb.pose_offset(fb.anchor), &(-rab_t * skew(&fb.position)));
        put(&mut a2, r, eb.pose_offset(fb.anchor) + 3, &(-rz));
        put(&mut a2, r, eb.feature_offset(jb), &(-rab_t));
        let dphi = -(skew(&Vec3::z()) * rz * xb);
        b.view_mut((r, 0), (3, 1)).copy_from(&dphi);
        put(&mut b, r, 1, &(-Mat3::identity()));
    }
    ConstraintBlocks { c, a1, a2, b }
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Solves `min C₁ + C₂ s.t. k = 0` for the two segments of `partition`.
pub fn solve_cm_constrained(
    data: &MappingData,
    partition: &SubmapPartition,
    config: &MapperConfig,
) -> Result<CmSolution, MapperError> {
    solve_cm_with(data, partition, config, QpMethod::RangeSpace)
}

pub fn solve_cm_with(
    data: &MappingData,
    partition: &SubmapPartition,
    config: &MapperConfig,
    method: QpMethod,
) -> Result<CmSolution, MapperError> {
    if partition.ranges.len() != 2 {
        return Err(MapperError::TooFewPoses(format!("expected two segments, got {}", partition.ranges.len())));
    }
    let pa = SubProblem::new(data, partition.ranges[0].clone(), config)?;
    let pb = SubProblem::new(data, partition.ranges[1].clone(), config)?;
    let common: Vec<u32> = pa.feature_ids.iter().filter(|id| pb.feature_index.contains_key(id)).copied().collect();
    let sa = solve_problem(&pa, config)?;
    let sb = solve_problem(&pb, config)?;
    let (mut ea, mut eb) = (sa.estimate.clone(), sb.estimate.clone());

    if common.is_empty() {
        let cons = constraints(&pa, &ea, &pb, &eb, &MapTransform4DoF::identity(), &common);
        return Ok(finish(&pa, &pb, sa, sb, MapTransform4DoF::identity(), common, cons, 0));
    }
    if common.len() < 2 {
        return Err(MapperError::ConstraintInfeasible("a 4-d.o.f. transform needs at least two common features".into()));
    }
    let src: Vec<Vec3> = common.iter().map(|id| eb.feature_in_map(pb.feature_index[id])).collect();
    let dst: Vec<Vec3> = common.iter().map(|id| ea.feature_in_map(pa.feature_index[id])).collect();
    let mut tau = MapTransform4DoF::align(&src, &dst)
        .ok_or_else(|| MapperError::ConstraintInfeasible("common features are degenerate".into()))?;

    let (na, nb) = (ea.dim(), eb.dim());
    let mut iterations = 0;
    for it in 0..config.max_iterations {
        iterations = it + 1;
        let la = pa.linearize(&ea);
        let lb = pb.linearize(&eb);
        let cons = constraints(&pa, &ea, &pb, &eb, &tau, &common);
        let (dxa, dxb, dtau) = match method {
            QpMethod::RangeSpace => range_space_step(&la.hessian, &la.gradient, &lb.hessian, &lb.gradient, &cons, config)?,
            QpMethod::DenseNullSpace => {
                let n = na + nb + 4;
                let mut hz = DMatrix::zeros(n, n);
                hz.view_mut((0, 0), (na, na)).copy_from(&la.hessian.to_dense());
                hz.view_mut((na, na), (nb, nb)).copy_from(&lb.hessian.to_dense());
                let mut gz = DVector::zeros(n);
                gz.rows_mut(0, na).copy_from(&la.gradient);
                gz.rows_mut(na, nb).copy_from(&lb.gradient);
                let mut cj = DMatrix::zeros(cons.c.len(), n);
                cj.view_mut((0, 0), (cons.c.len(), na)).copy_from(&cons.a1);
                cj.view_mut((0, na), (cons.c.len(), nb)).copy_from(&cons.a2);
                cj.view_mut((0, na + nb), (cons.c.len(), 4)).copy_from(&cons.b);
                let dz = dense_nullspace_solve(&hz, &gz, &cj, &cons.c)
                    .ok_or_else(|| MapperError::ConstraintInfeasible("null-space system singular".into()))?;
                (dz.rows(0, na).into_owned(), dz.rows(na, nb).into_owned(), dz.rows(na + nb, 4).into_owned())
            }
        };
        ea = ea.apply(&dxa);
        eb = eb.apply(&dxb);
        tau = tau.perturbed(dtau[0], &Vec3::new(dtau[1], dtau[2], dtau[3]));
        let step = dxa.amax().max(dxb.amax()).max(dtau.amax());
        if step < 1e-10 && cons.c.amax() < 1e-9 {
            break;
        }
    }
    let la = pa.linearize(&ea);
    let lb = pb.linearize(&eb);
    let cons = constraints(&pa, &ea, &pb, &eb, &tau, &common);
    let violation = cons.c.amax();
    if violation > 1e-8 {
        return Err(MapperError::NotConverged { iterations, gradient_norm: violation });
    }
    let fa = cholesky(&la.hessian, config.ordering).map_err(MapperError::RankDeficient)?;
    let fb = cholesky(&lb.hessian, config.ordering).map_err(MapperError::RankDeficient)?;
    let rms = |p: &SubProblem<'_>, sq: f64| (sq / (2 * p.obs.len().max(1)) as f64).sqrt();
    let sa = MapSolution {
        estimate: ea,
        reprojection_rms: rms(&pa, la.reprojection_sq),
        gradient_norm: la.gradient.norm(),
        hessian: la.hessian,
        factor: fa,
        iterations,
        visibility: pa.visibility(),
    };
    let sb = MapSolution {
        estimate: eb,
        reprojection_rms: rms(&pb, lb.reprojection_sq),
        gradient_norm: lb.gradient.norm(),
        hessian: lb.hessian,
        factor: fb,
        iterations,
        visibility: pb.visibility(),
    };
    Ok(finish(&pa, &pb, sa, sb, tau, common, cons, iterations))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    pa: &SubProblem<'_>,
    pb: &SubProblem<'_>,
    sa: MapSolution,
    sb: MapSolution,
    transform: MapTransform4DoF,
    common: Vec<u32>,
    constraints: ConstraintBlocks,
    iterations: usize,
) -> CmSolution {
    CmSolution {
        ranges: [pa.range(), pb.range()],
        constraint_violation: constraints.c.amax(),
        estimates: [sa.estimate, sb.estimate],
        hessians: [sa.hessian, sb.hessian],
        factors: [sa.factor, sb.factor],
        visibility: [sa.visibility, sb.visibility],
        transform,
        common,
        constraints,
        iterations,
    }
}

/// One SQP step: `dx = −H⁻¹(g + Aᵀλ)` with `[Θ −B; −Bᵀ 0][λ; dτ] = [c − AH⁻¹g; 0]`.
fn range_space_step(
    ha: &SparseSymmetric,
    ga: &DVector<f64>,
    hb: &SparseSymmetric,
    gb: &DVector<f64>,
    cons: &ConstraintBlocks,
    config: &MapperConfig,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), MapperError> {
    let fa = cholesky(ha, config.ordering).map_err(MapperError::RankDeficient)?;
    let fb = cholesky(hb, config.ordering).map_err(MapperError::RankDeficient)?;
    let ya = fa.solve(&cons.a1.transpose()).map_err(MapperError::RankDeficient)?;
    let yb = fb.solve(&cons.a2.transpose()).map_err(MapperError::RankDeficient)?;
    let hga = fa.solve(&col(ga)).map_err(MapperError::RankDeficient)?.column(0).into_owned();
    let hgb = fb.solve(&col(gb)).map_err(MapperError::RankDeficient)?.column(0).into_owned();
    let m = cons.c.len();
    let theta = &cons.a1 * &ya + &cons.a2 * &yb;
    let mut k = DMatrix::zeros(m + 4, m + 4);
    k.view_mut((0, 0), (m, m)).copy_from(&theta);
    k.view_mut((0, m), (m, 4)).copy_from(&(-&cons.b));
    k.view_mut((m, 0), (4, m)).copy_from(&(-cons.b.transpose()));
    let mut rhs = DVector::zeros(m + 4);
    rhs.rows_mut(0, m).copy_from(&(&cons.c - &cons.a1 * &hga - &cons.a2 * &hgb));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MapperError::ConstraintInfeasible("singular multiplier system".into()))?;
    let lambda = sol.rows(0, m).into_owned();
    let dtau = sol.rows(m, 4).into_owned();
    let dxa = -(hga + &ya * &lambda);
    let dxb = -(hgb + &yb * &lambda);
    Ok((dxa, dxb, dtau))
}

/// Sub-map produced by [`build_submaps`].
#[derive(Debug, Clone)]
pub struct SubmapSolution {
    pub range: Range<usize>,
    pub estimate: MapEstimate,
    pub hessian: SparseSymmetric,
    pub factor: SparseLowerTriangular,
    pub visibility: Vec<Vec<u32>>,
    /// Transform into the frame of the sub-map it was jointly solved with.
    pub transform: MapTransform4DoF,
}

/// Splits the keyframes into `count` sub-maps by recursive pairwise
/// cooperative mapping; `count == 1` is the plain batch solve.
pub fn build_submaps(data: &MappingData, count: usize, config: &MapperConfig) -> Result<Vec<SubmapSolution>, MapperError> {
    let n = data.truth_poses.len();
    if count == 0 {
        return Err(MapperError::TooFewPoses("sub-map count must be positive".into()));
    }
    if count == 1 {
        let s = super::build_map_bls(data, config)?;
        return Ok(vec![SubmapSolution {
            range: 0..n,
            estimate: s.estimate,
            hessian: s.hessian,
            factor: s.factor,
            visibility: s.visibility,
            transform: MapTransform4DoF::identity(),
        }]);
    }
    if n < 2 * count {
        return Err(MapperError::TooFewPoses(format!("{n} poses cannot form {count} sub-maps")));
    }
    let mut out = Vec::with_capacity(count);
    split(data, 0..n, count, config, &mut out)?;
    Ok(out)
}

fn split(
    data: &MappingData,
    range: Range<usize>,
    count: usize,
    config: &MapperConfig,
    out: &mut Vec<SubmapSolution>,
) -> Result<(), MapperError> {
    let (nl, nr) = (count.div_ceil(2), count / 2);
    let mid = range.start + range.len() * nl / count;
    let (left, right) = (range.start..mid, mid..range.end);
    let cm = if nl == 1 || nr == 1 {
        let partition = SubmapPartition {
            ranges: vec![left.clone(), right.clone()],
            features: Vec::new(),
        };
        Some(solve_cm_constrained(data, &partition, config)?)
    } else {
        None
    };
    let leaf = |cm: &CmSolution, side: usize| SubmapSolution {
        range: cm.ranges[side].clone(),
        estimate: cm.estimates[side].clone(),
        hessian: cm.hessians[side].clone(),
        factor: cm.factors[side].clone(),
        visibility: cm.visibility[side].clone(),
        transform: if side == 1 { cm.transform } else { MapTransform4DoF::identity() },
    };
    if nl == 1 {
        out.push(leaf(cm.as_ref().unwrap(), 0));
    } else {
        split(data, left, nl, config, out)?;
    }
    if nr == 1 {
        out.push(leaf(cm.as_ref().unwrap(), 1));
    } else {
        split(data, right, nr, config, out)?;
    }
    Ok(())
}
