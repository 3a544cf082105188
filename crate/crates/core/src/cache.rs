//! On-disk cache of preprocessed shapes, keyed by mesh content and
//! preprocessing parameters.
//!
//! Each entry is a pair of files `<key>.dsec` (eigenpairs) and `<key>.dsft`
//! (SHOT descriptors), both in input vertex order.

use crate::error::Result;
use crate::mesh::TriMesh;
use crate::shells::{PreparedShape, Preprocess};
use crate::shot::{read_features, write_features};
use crate::spectral::{mesh_hash, read_basis, write_basis};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ShapeCache {
    dir: PathBuf,
}

impl ShapeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ShapeCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(mesh: &TriMesh, pre: &Preprocess) -> String {
        let mut h = Sha256::new();
        h.update(mesh_hash(mesh).as_bytes());
        h.update((pre.eigenpairs as u64).to_le_bytes());
        h.update(pre.shot.radius_fraction.to_le_bytes());
        h.update(format!("{:?}", pre.shot.diameter).as_bytes());
        h.update(pre.sqrt_area.to_le_bytes());
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("{key}.dsec")), self.dir.join(format!("{key}.dsft")))
    }

    pub fn contains(&self, mesh: &TriMesh, pre: &Preprocess) -> bool {
        let (b, f) = self.paths(&ShapeCache::key(mesh, pre));
        b.is_file() && f.is_file()
    }

    /// The cached shape, or `None` when either file is missing.
    pub fn load(&self, mesh: &TriMesh, pre: &Preprocess) -> Result<Option<PreparedShape>> {
        if !self.contains(mesh, pre) {
            return Ok(None);
        }
        let (b, f) = self.paths(&ShapeCache::key(mesh, pre));
        let basis = read_basis(b)?;
        let features = read_features(f, "shot")?;
        PreparedShape::from_parts(mesh, pre.sqrt_area, basis, features).map(Some)
    }

    pub fn store(&self, mesh: &TriMesh, pre: &Preprocess, shape: &PreparedShape) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let (b, f) = self.paths(&ShapeCache::key(mesh, pre));
        write_basis(&shape.basis, b)?;
        write_features(&shape.features, f)
    }

    /// Loads the entry, computing and storing it first if absent.
    pub fn get_or_prepare(&self, mesh: &TriMesh, pre: &Preprocess) -> Result<PreparedShape> {
        if let Some(shape) = self.load(mesh, pre)? {
            return Ok(shape);
        }
        let shape = PreparedShape::prepare_with(mesh, pre)?;
        self.store(mesh, pre, &shape)?;
        // Round-trip so fresh and cached runs see identical single-precision features.
        Ok(self.load(mesh, pre)?.expect("entry just stored"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_icosphere;
    use crate::shot::ShotConfig;

    fn pre() -> Preprocess {
        Preprocess {
            eigenpairs: 12,
            shot: ShotConfig {
                radius_fraction: 0.3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn store_and_load_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ShapeCache::new(dir.path());
        let mesh = make_icosphere(1, 1.0).unwrap();
        assert!(cache.load(&mesh, &pre()).unwrap().is_none());
        let a = cache.get_or_prepare(&mesh, &pre()).unwrap();
        assert!(cache.contains(&mesh, &pre()));
        let b = cache.load(&mesh, &pre()).unwrap().unwrap();
        assert_eq!(a.mesh.vertices(), b.mesh.vertices());
        assert_eq!(a.basis.eigenvectors(), b.basis.eigenvectors());
        assert_eq!(a.features.values(), b.features.values());
        let fresh = PreparedShape::prepare_with(&mesh, &pre()).unwrap();
        assert_eq!(fresh.mesh.vertices(), b.mesh.vertices());
        assert!((fresh.features.values() - b.features.values()).amax() < 1e-6);
    }

    #[test]
    fn key_depends_on_parameters() {
        let mesh = make_icosphere(1, 1.0).unwrap();
        let mut other = pre();
        other.eigenpairs = 13;
        assert_ne!(ShapeCache::key(&mesh, &pre()), ShapeCache::key(&mesh, &other));
        assert_eq!(ShapeCache::key(&mesh, &pre()), ShapeCache::key(&mesh, &pre()));
    }
}
