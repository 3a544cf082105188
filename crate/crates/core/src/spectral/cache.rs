//! Eigenpair cache files (`DSEC`).
//!
//! Layout, little-endian: magic `DSEC`, version u32, n u64, K u64, K f64
//! eigenvalues, then n·K f64 eigenvector entries in column-major order.

use super::SpectralBasis;
use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::mesh::TriMesh;
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSEC";
const VERSION: u32 = 1;

pub fn write_basis(basis: &SpectralBasis, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(basis.num_vertices() as u64);
    w.u64(basis.len() as u64);
    for v in basis.eigenvalues().iter() {
        w.f64(*v);
    }
    for v in basis.eigenvectors().iter() {
        w.f64(*v);
    }
    w.save(path)
}

pub fn read_basis(path: impl AsRef<Path>) -> Result<SpectralBasis> {
    let mut r = Reader::open(path)?;
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("DSEC version {version} unsupported")));
    }
    let n = r.u64()? as usize;
    let k = r.u64()? as usize;
    let payload = n
        .checked_mul(k)
        .and_then(|x| x.checked_add(k))
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| Error::Format("DSEC dimensions overflow".into()))?;
    r.expect_remaining(payload)?;
    let values = DVector::from_iterator(k, (0..k).map(|_| r.f64().unwrap()));
    let vectors = DMatrix::from_iterator(n, k, (0..n * k).map(|_| r.f64().unwrap()));
    SpectralBasis::new(values, vectors)
}

/// Hex SHA-256 over vertex coordinates and triangle indices.
pub fn mesh_hash(mesh: &TriMesh) -> String {
    let mut h = Sha256::new();
    for v in mesh.vertices() {
        for c in v.iter() {
            h.update(c.to_le_bytes());
        }
    }
    for t in mesh.triangles() {
        for i in t {
            h.update((*i as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_icosphere;
    use crate::spectral::{build_laplacian, eigendecompose};

    #[test]
    fn round_trip_and_header() {
        let m = make_icosphere(1, 1.0).unwrap();
        let b = eigendecompose(&build_laplacian(&m), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.dsec");
        write_basis(&b, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DSEC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 42);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 7);
        assert_eq!(bytes.len(), 24 + 8 * (7 + 42 * 7));
        // second eigenvector entry of vertex 0 sits after the first column
        let off = 24 + 8 * 7 + 8 * 42;
        let x = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        assert_eq!(x, b.eigenvectors()[(0, 1)]);
        assert_eq!(read_basis(&p).unwrap(), b);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.dsec");
        std::fs::write(&p, b"DSEC\x01\0\0\0\x05\0\0\0\0\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_basis(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"XXXX").unwrap();
        assert!(matches!(read_basis(&p), Err(Error::Format(_))));
    }

    #[test]
    fn hash_is_content_based() {
        let a = make_icosphere(1, 1.0).unwrap();
        let b = make_icosphere(1, 1.0).unwrap();
        assert_eq!(mesh_hash(&a), mesh_hash(&b));
        assert_ne!(mesh_hash(&a), mesh_hash(&a.scaled(2.0)));
        assert_eq!(mesh_hash(&a).len(), 64);
    }
}
