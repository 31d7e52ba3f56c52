//! Map bundle container.
//!
//! Little-endian layout: magic `CSKB`, version u32, sub-map count u32,
//! gravity (3 × f64), pixel σ, camera intrinsics, then per sub-map the
//! 4-d.o.f. transform, pose array, feature array, index-layout table,
//! per-pose visibility lists and the embedded factor. A CRC-64 of everything
//! before it closes the file.

use std::collections::BTreeSet;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use crc::{Crc, CRC_64_ECMA_182};
use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use super::cm::SubmapSolution;
use super::{MapFeature, MapSolution};
use crate::geom::{CameraModel, MapTransform4DoF, Pose, Vec3};
use crate::sim::gravity;
use crate::sparse::{read_factor, write_factor, SparseError, SparseLowerTriangular};

pub const BUNDLE_MAGIC: [u8; 4] = *b"CSKB";
pub const BUNDLE_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);
const MAX_COUNT: u64 = 1 << 26;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle format error: {0}")]
    Format(String),
    #[error("unsupported bundle version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("bundle checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("invalid bundle: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One sub-map: its poses and anchored features, the Cholesky factor of its
/// own Hessian, and the estimated transform into the reference sub-map.
#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    pub transform: MapTransform4DoF,
    /// Keyframe index of each pose in the mapping session.
    pub pose_ids: Vec<u32>,
    pub poses: Vec<Pose>,
    pub features: Vec<MapFeature>,
    /// Error-state offset of each pose (θ then p), then of each feature.
    pub pose_offsets: Vec<usize>,
    pub feature_offsets: Vec<usize>,
    /// Feature indices seen from each pose.
    pub visibility: Vec<Vec<u32>>,
    pub factor: SparseLowerTriangular,
}

impl Submap {
    pub fn new(
        first_pose_id: u32,
        poses: Vec<Pose>,
        features: Vec<MapFeature>,
        visibility: Vec<Vec<u32>>,
        factor: SparseLowerTriangular,
        transform: MapTransform4DoF,
    ) -> Self {
        let np = poses.len();
        Self {
            transform,
            pose_ids: (0..np as u32).map(|i| first_pose_id + i).collect(),
            pose_offsets: (0..np).map(|i| 6 * i).collect(),
            feature_offsets: (0..features.len()).map(|j| 6 * np + 3 * j).collect(),
            poses,
            features,
            visibility,
            factor,
        }
    }

    pub fn dim(&self) -> usize {
        6 * self.poses.len() + 3 * self.features.len()
    }

    /// Feature `j` in the sub-map frame.
    pub fn feature_in_map(&self, j: usize) -> Vec3 {
        let f = &self.features[j];
        self.poses[f.anchor].to_reference(&f.position)
    }

    fn validate(&self, index: usize) -> Result<(), BundleError> {
        let bad = |m: String| Err(BundleError::Invalid(format!("sub-map {index}: {m}")));
        let (np, nf) = (self.poses.len(), self.features.len());
        if np == 0 {
            return bad("no poses".into());
        }
        if self.pose_ids.len() != np || self.visibility.len() != np {
            return bad("pose id / visibility table length differs from pose count".into());
        }
        if self.factor.dim() != self.dim() {
            return bad(format!("factor dim {} differs from state dim {}", self.factor.dim(), self.dim()));
        }
        if self.pose_offsets.iter().enumerate().any(|(i, &o)| o != 6 * i)
            || self.pose_offsets.len() != np
            || self.feature_offsets.len() != nf
            || self.feature_offsets.iter().enumerate().any(|(j, &o)| o != 6 * np + 3 * j)
        {
            return bad("index layout does not match pose/feature counts".into());
        }
        for p in &self.poses {
            if (p.q.norm() - 1.0).abs() > 1e-9 || !p.p.iter().all(|v| v.is_finite()) {
                return bad("pose with non-unit quaternion or non-finite position".into());
            }
        }
        let mut ids = BTreeSet::new();
        for f in &self.features {
            if f.anchor >= np {
                return bad(format!("feature {} anchored at missing pose {}", f.id, f.anchor));
            }
            if !ids.insert(f.id) {
                return bad(format!("duplicate feature id {}", f.id));
            }
            if !f.position.iter().all(|v| v.is_finite()) {
                return bad(format!("feature {} has non-finite position", f.id));
            }
        }
        if self.visibility.iter().flatten().any(|&j| j as usize >= nf) {
            return bad("visibility references a missing feature".into());
        }
        let mut pids = BTreeSet::new();
        if !self.pose_ids.iter().all(|id| pids.insert(*id)) {
            return bad("duplicate pose id".into());
        }
        if !self.transform.yaw.is_finite() || !self.transform.translation.iter().all(|v| v.is_finite()) {
            return bad("non-finite transform".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapBundle {
    pub gravity: Vec3,
    pub pixel_sigma: f64,
    pub camera: CameraModel,
    pub submaps: Vec<Submap>,
}

impl MapBundle {
    pub fn from_solution(solution: MapSolution, camera: CameraModel, pixel_sigma: f64) -> Self {
        let sub = Submap::new(
            0,
            solution.estimate.poses,
            solution.estimate.features,
            solution.visibility,
            solution.factor,
            MapTransform4DoF::identity(),
        );
        Self { gravity: gravity(), pixel_sigma, camera, submaps: vec![sub] }
    }

    pub fn from_submaps(parts: Vec<SubmapSolution>, camera: CameraModel, pixel_sigma: f64) -> Self {
        let submaps = parts
            .into_iter()
            .map(|s| {
                Submap::new(s.range.start as u32, s.estimate.poses, s.estimate.features, s.visibility, s.factor, s.transform)
            })
            .collect();
        Self { gravity: gravity(), pixel_sigma, camera, submaps }
    }

    pub fn total_dim(&self) -> usize {
        self.submaps.iter().map(Submap::dim).sum()
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        if self.submaps.is_empty() {
            return Err(BundleError::Invalid("bundle has no sub-maps".into()));
        }
        if !(self.pixel_sigma > 0.0) || !self.gravity.iter().all(|v| v.is_finite()) {
            return Err(BundleError::Invalid("bad metadata".into()));
        }
        self.camera.validate().map_err(BundleError::Invalid)?;
        for (i, s) in self.submaps.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(())
    }
}

fn sparse_err(e: SparseError) -> BundleError {
    match e {
        SparseError::Io(e) => BundleError::Io(e),
        SparseError::VersionMismatch { found, expected } => {
            BundleError::Format(format!("embedded factor version {found}, expected {expected}"))
        }
        SparseError::InvalidFactor(m) => BundleError::Invalid(m),
        other => BundleError::Format(other.to_string()),
    }
}

fn put_vec3<W: Write>(w: &mut W, v: &Vec3) -> std::io::Result<()> {
    for x in v.iter() {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

/// Serializes the bundle with its checksum trailer.
pub fn write_bundle<W: Write>(w: &mut W, bundle: &MapBundle) -> Result<(), BundleError> {
    bundle.validate()?;
    let mut buf = Vec::new();
    buf.write_all(&BUNDLE_MAGIC)?;
    buf.write_u32::<LittleEndian>(BUNDLE_VERSION)?;
    buf.write_u32::<LittleEndian>(bundle.submaps.len() as u32)?;
    put_vec3(&mut buf, &bundle.gravity)?;
    buf.write_f64::<LittleEndian>(bundle.pixel_sigma)?;
    let c = &bundle.camera;
    for v in [c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.sigma_px] {
        buf.write_f64::<LittleEndian>(v)?;
    }
    for s in &bundle.submaps {
        buf.write_f64::<LittleEndian>(s.transform.yaw)?;
        put_vec3(&mut buf, &s.transform.translation)?;
        buf.write_u64::<LittleEndian>(s.poses.len() as u64)?;
        for (id, p) in s.pose_ids.iter().zip(&s.poses) {
            buf.write_u32::<LittleEndian>(*id)?;
            let q = p.q.quaternion();
            for v in [q.i, q.j, q.k, q.w] {
                buf.write_f64::<LittleEndian>(v)?;
            }
            put_vec3(&mut buf, &p.p)?;
        }
        buf.write_u64::<LittleEndian>(s.features.len() as u64)?;
        for f in &s.features {
            buf.write_u32::<LittleEndian>(f.id)?;
            buf.write_u64::<LittleEndian>(f.anchor as u64)?;
            put_vec3(&mut buf, &f.position)?;
        }
        for o in s.pose_offsets.iter().chain(&s.feature_offsets) {
            buf.write_u64::<LittleEndian>(*o as u64)?;
        }
        for vis in &s.visibility {
            buf.write_u64::<LittleEndian>(vis.len() as u64)?;
            for j in vis {
                buf.write_u32::<LittleEndian>(*j)?;
            }
        }
        write_factor(&mut buf, &s.factor).map_err(sparse_err)?;
    }
    let crc = CRC64.checksum(&buf);
    buf.write_u64::<LittleEndian>(crc)?;
    w.write_all(&buf)?;
    Ok(())
}

fn eof(e: std::io::Error) -> BundleError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        BundleError::Format("truncated bundle".into())
    } else {
        BundleError::Io(e)
    }
}

fn get_vec3<R: Read>(r: &mut R) -> Result<Vec3, BundleError> {
    Ok(Vec3::new(
        r.read_f64::<LittleEndian>().map_err(eof)?,
        r.read_f64::<LittleEndian>().map_err(eof)?,
        r.read_f64::<LittleEndian>().map_err(eof)?,
    ))
}

fn get_count<R: Read>(r: &mut R) -> Result<usize, BundleError> {
    let n = r.read_u64::<LittleEndian>().map_err(eof)?;
    if n > MAX_COUNT {
        return Err(BundleError::Format(format!("implausible element count {n}")));
    }
    Ok(n as usize)
}

/// Parses and validates a bundle; the checksum is verified before any field.
pub fn read_bundle<R: Read>(r: &mut R) -> Result<MapBundle, BundleError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 + 8 {
        return Err(BundleError::Format("file too short".into()));
    }
    if bytes[..4] != BUNDLE_MAGIC {
        return Err(BundleError::Format("bad bundle magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(BundleError::VersionMismatch { found: version, expected: BUNDLE_VERSION });
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let computed = CRC64.checksum(payload);
    if stored != computed {
        return Err(BundleError::ChecksumMismatch { stored, computed });
    }
    let mut r = Cursor::new(&payload[8..]);
    let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let gravity = get_vec3(&mut r)?;
    let pixel_sigma = r.read_f64::<LittleEndian>().map_err(eof)?;
    let mut cam = [0.0; 7];
    for v in cam.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(eof)?;
    }
    let camera = CameraModel { fx: cam[0], fy: cam[1], cx: cam[2], cy: cam[3], width: cam[4], height: cam[5], sigma_px: cam[6] };
    let mut submaps = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let yaw = r.read_f64::<LittleEndian>().map_err(eof)?;
        let translation = get_vec3(&mut r)?;
        let np = get_count(&mut r)?;
        let mut pose_ids = Vec::with_capacity(np);
        let mut poses = Vec::with_capacity(np);
        for _ in 0..np {
            pose_ids.push(r.read_u32::<LittleEndian>().map_err(eof)?);
            let mut q = [0.0; 4];
            for v in q.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(eof)?;
            }
            // Stored values are kept verbatim; the unit-norm check happens in validation.
            let q = UnitQuaternion::new_unchecked(Quaternion::new(q[3], q[0], q[1], q[2]));
            poses.push(Pose::new(q, get_vec3(&mut r)?));
        }
        let nf = get_count(&mut r)?;
        let mut features = Vec::with_capacity(nf);
        for _ in 0..nf {
            let id = r.read_u32::<LittleEndian>().map_err(eof)?;
            let anchor = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
            features.push(MapFeature { id, anchor, position: get_vec3(&mut r)? });
        }
        let mut offsets = Vec::with_capacity(np + nf);
        for _ in 0..np + nf {
            offsets.push(r.read_u64::<LittleEndian>().map_err(eof)? as usize);
        }
        let feature_offsets = offsets.split_off(np);
        let mut visibility = Vec::with_capacity(np);
        for _ in 0..np {
            let n = get_count(&mut r)?;
            visibility.push((0..n).map(|_| r.read_u32::<LittleEndian>().map_err(eof)).collect::<Result<Vec<_>, _>>()?);
        }
        let factor = read_factor(&mut r).map_err(sparse_err)?;
        submaps.push(Submap {
            transform: MapTransform4DoF { yaw, translation },
            pose_ids,
            poses,
            features,
            pose_offsets: offsets,
            feature_offsets,
            visibility,
            factor,
        });
    }
    if (r.position() as usize) != payload.len() - 8 {
        return Err(BundleError::Format("trailing bytes after last sub-map".into()));
    }
    let bundle = MapBundle { gravity, pixel_sigma, camera, submaps };
    bundle.validate()?;
    Ok(bundle)
}

pub fn export_bundle(path: &Path, bundle: &MapBundle) -> Result<(), BundleError> {
    let mut buf = Vec::new();
    write_bundle(&mut buf, bundle)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn import_bundle(path: &Path) -> Result<MapBundle, BundleError> {
    let mut f = std::fs::File::open(path)?;
    read_bundle(&mut f)
}
