//! Little-endian binary layout of a factor:
//! magic `CSKF`, version u32, dim u64, nnz u64, perm, col_ptr, row_idx (u64),
//! values (f64).

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{SparseError, SparseLowerTriangular};

pub const FACTOR_MAGIC: [u8; 4] = *b"CSKF";
pub const FACTOR_VERSION: u32 = 1;

/// Refuse absurd sizes before allocating.
const MAX_DIM: u64 = 1 << 28;

pub fn write_factor<W: Write>(w: &mut W, g: &SparseLowerTriangular) -> Result<(), SparseError> {
    w.write_all(&FACTOR_MAGIC)?;
    w.write_u32::<LittleEndian>(FACTOR_VERSION)?;
    w.write_u64::<LittleEndian>(g.dim as u64)?;
    w.write_u64::<LittleEndian>(g.nnz() as u64)?;
    for &p in &g.perm {
        w.write_u64::<LittleEndian>(p as u64)?;
    }
    for &p in &g.col_ptr {
        w.write_u64::<LittleEndian>(p as u64)?;
    }
    for &r in &g.row_idx {
        w.write_u64::<LittleEndian>(r as u64)?;
    }
    for &v in &g.values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_factor<R: Read>(r: &mut R) -> Result<SparseLowerTriangular, SparseError> {
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SparseError::Format("truncated factor".into())
        } else {
            SparseError::Io(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if magic != FACTOR_MAGIC {
        return Err(SparseError::Format("bad factor magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != FACTOR_VERSION {
        return Err(SparseError::VersionMismatch { found: version, expected: FACTOR_VERSION });
    }
    let dim = r.read_u64::<LittleEndian>().map_err(eof)?;
    let nnz = r.read_u64::<LittleEndian>().map_err(eof)?;
    if dim == 0 || dim > MAX_DIM || nnz > dim.saturating_mul(dim) {
        return Err(SparseError::Format(format!("implausible factor size dim={dim} nnz={nnz}")));
    }
    let (dim, nnz) = (dim as usize, nnz as usize);
    let mut read_idx = |len: usize| -> Result<Vec<usize>, SparseError> {
        (0..len).map(|_| r.read_u64::<LittleEndian>().map(|v| v as usize).map_err(eof)).collect()
    };
    let perm = read_idx(dim)?;
    let col_ptr = read_idx(dim + 1)?;
    let row_idx = read_idx(nnz)?;
    let values = (0..nnz)
        .map(|_| r.read_f64::<LittleEndian>().map_err(eof))
        .collect::<Result<Vec<_>, _>>()?;
    SparseLowerTriangular::from_parts(dim, col_ptr, row_idx, values, perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{cholesky, Ordering, SparseSymmetric};

    fn sample() -> SparseLowerTriangular {
        let mut a = SparseSymmetric::new(4);
        for i in 0..4 {
            a.add(i, i, 4.0 + i as f64);
        }
        a.add(0, 3, 1.0);
        a.add(1, 2, -0.5);
        cholesky(&a, Ordering::FillReducing).unwrap()
    }

    #[test]
    fn round_trip() {
        let g = sample();
        let mut buf = Vec::new();
        write_factor(&mut buf, &g).unwrap();
        assert_eq!(&buf[..4], b"CSKF");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 8 * (4 + 5 + 2 * g.nnz()));
        let back = read_factor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let g = sample();
        let mut buf = Vec::new();
        write_factor(&mut buf, &g).unwrap();
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_factor(&mut &short[..]), Err(SparseError::Format(_))));
        buf[0] = b'X';
        assert!(matches!(read_factor(&mut buf.as_slice()), Err(SparseError::Format(_))));
    }

    #[test]
    fn version_checked() {
        let g = sample();
        let mut buf = Vec::new();
        write_factor(&mut buf, &g).unwrap();
        buf[4] = 9;
        assert!(matches!(read_factor(&mut buf.as_slice()), Err(SparseError::VersionMismatch { found: 9, .. })));
    }
}
