//! SHOT descriptors (signatures of histograms of orientations).
//!
//! Around every vertex a spherical support of radius `r` is split into
//! 8 azimuth × 2 elevation × 2 radial sectors, expressed in a local
//! reference frame. Each sector histograms the cosine between neighbor
//! normals and the frame's z-axis into 11 bins, giving 352 values.

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::mesh::geodesic::EdgeGraph;
use crate::mesh::TriMesh;
use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

pub const AZIMUTH_SECTORS: usize = 8;
pub const ELEVATION_SECTORS: usize = 2;
pub const RADIAL_SECTORS: usize = 2;
pub const SPATIAL_BINS: usize = AZIMUTH_SECTORS * ELEVATION_SECTORS * RADIAL_SECTORS;
pub const COSINE_BINS: usize = 11;
pub const DESCRIPTOR_DIM: usize = SPATIAL_BINS * COSINE_BINS;

/// Per-vertex signal with a free-form label describing its channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: DMatrix<f64>,
    label: String,
}

impl FeatureMap {
    pub fn new(values: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        Ok(FeatureMap {
            values,
            label: label.into(),
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn num_vertices(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}

/// How the support radius is measured relative to the shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiameterKind {
    /// Largest distance between two vertices.
    #[default]
    Euclidean,
    /// Double-sweep estimate of the largest edge-path distance.
    Geodesic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotConfig {
    /// Support radius as a fraction of the diameter, in (0, 0.5].
    pub radius_fraction: f64,
    pub diameter: DiameterKind,
}

impl Default for ShotConfig {
    fn default() -> Self {
        ShotConfig {
            radius_fraction: 0.05,
            diameter: DiameterKind::Euclidean,
        }
    }
}

impl ShotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_fraction > 0.0 && self.radius_fraction <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "radius_fraction must lie in (0, 0.5], got {}",
                self.radius_fraction
            )));
        }
        Ok(())
    }
}

pub fn shape_diameter(mesh: &TriMesh) -> f64 {
    mesh.diameter()
}

fn geodesic_diameter(mesh: &TriMesh) -> f64 {
    let graph = EdgeGraph::new(mesh);
    let farthest = |d: &[f64]| {
        d.iter()
            .enumerate()
            .filter(|(_, x)| x.is_finite())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, x)| (i, *x))
            .unwrap_or((0, 0.0))
    };
    let (a, _) = farthest(&graph.dijkstra(0));
    farthest(&graph.dijkstra(a)).1
}

/// Buckets vertices into cubes of side `cell` for radius queries.
struct SpatialGrid {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl SpatialGrid {
    fn new(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        SpatialGrid { cell, buckets }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Indices other than `center` strictly within `radius`, in index order.
    fn within(&self, points: &[Vector3<f64>], center: usize, radius: f64) -> Vec<(usize, f64)> {
        let p = points[center];
        let k = Self::key(&p, self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &q in b {
                            if q == center {
                                continue;
                            }
                            let d = (points[q] - p).norm();
                            if d < radius {
                                out.push((q, d));
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|e| e.0);
        out
    }
}

/// Rows are the x, y, z axes of the local frame.
fn local_frame(
    center: &Vector3<f64>,
    normal: &Vector3<f64>,
    points: &[Vector3<f64>],
    neighbors: &[(usize, f64)],
    radius: f64,
) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    let mut wsum = 0.0;
    for &(q, d) in neighbors {
        let o = points[q] - center;
        let w = radius - d;
        cov += o * o.transpose() * w;
        wsum += w;
    }
    let mut x;
    let mut z;
    let eig = if wsum > 0.0 {
        Some(SymmetricEigen::new(cov / wsum))
    } else {
        None
    };
    let order = eig.as_ref().map(|e| {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        idx
    });
    let rank_ok = match (&eig, &order) {
        (Some(e), Some(o)) => {
            let top = e.eigenvalues[o[0]];
            top > 0.0 && e.eigenvalues[o[1]] > 1e-10 * top
        }
        _ => false,
    };
    let side = |axis: &Vector3<f64>| -> f64 {
        neighbors
            .iter()
            .map(|&(q, d)| {
                let s = (points[q] - center).dot(axis);
                (radius - d) * if s > 0.0 { 1.0 } else if s < 0.0 { -1.0 } else { 0.0 }
            })
            .sum()
    };
    if rank_ok {
        let (e, o) = (eig.unwrap(), order.unwrap());
        x = e.eigenvectors.column(o[0]).into_owned();
        z = e.eigenvectors.column(o[2]).into_owned();
        let sx = side(&x);
        if sx < 0.0 {
            x = -x;
        }
        let sz = side(&z);
        if sz < 0.0 || (sz == 0.0 && z.dot(normal) < 0.0) {
            z = -z;
        }
    } else {
        z = *normal;
        let mean: Vector3<f64> = neighbors
            .iter()
            .map(|&(q, d)| (points[q] - center) * (radius - d))
            .sum();
        x = mean - z * z.dot(&mean);
        if x.norm() <= 1e-12 * (1.0 + mean.norm()) {
            let pick = [Vector3::x(), Vector3::y(), Vector3::z()]
                .into_iter()
                .min_by(|a, b| a.dot(&z).abs().total_cmp(&b.dot(&z).abs()))
                .unwrap();
            x = pick - z * z.dot(&pick);
        }
        x = x.normalize();
    }
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn describe(
    center: usize,
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    neighbors: &[(usize, f64)],
    radius: f64,
) -> [f64; DESCRIPTOR_DIM] {
    let mut hist = [0.0; DESCRIPTOR_DIM];
    if neighbors.is_empty() {
        return hist;
    }
    let p = points[center];
    let frame = local_frame(&p, &normals[center], points, neighbors, radius);
    let z = frame.row(2).transpose();
    for &(q, d) in neighbors {
        let l = frame * (points[q] - p);
        let cos = normals[q].dot(&z).clamp(-1.0, 1.0);
        let u = ((cos + 1.0) / 2.0 * COSINE_BINS as f64 - 0.5).clamp(0.0, (COSINE_BINS - 1) as f64);
        let c0 = u.floor() as usize;
        let cf = u - c0 as f64;
        let phi = l.y.atan2(l.x);
        let a = (phi + PI) / (2.0 * PI) * AZIMUTH_SECTORS as f64 - 0.5;
        let a0f = a.floor();
        let af = a - a0f;
        let a0 = (a0f as i64).rem_euclid(AZIMUTH_SECTORS as i64) as usize;
        let a1 = (a0 + 1) % AZIMUTH_SECTORS;
        let elev = usize::from(l.z >= 0.0);
        let rad = usize::from(d >= radius / 2.0);
        for (az, wa) in [(a0, 1.0 - af), (a1, af)] {
            let sector = (az * ELEVATION_SECTORS + elev) * RADIAL_SECTORS + rad;
            let base = sector * COSINE_BINS;
            hist[base + c0] += wa * (1.0 - cf);
            if c0 + 1 < COSINE_BINS {
                hist[base + c0 + 1] += wa * cf;
            }
        }
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in hist.iter_mut() {
            *v /= norm;
        }
    }
    hist
}

/// One unit-norm (or zero) 352-vector per vertex.
pub fn compute_shot(mesh: &TriMesh, cfg: &ShotConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let diameter = match cfg.diameter {
        DiameterKind::Euclidean => shape_diameter(mesh),
        DiameterKind::Geodesic => geodesic_diameter(mesh),
    };
    let radius = cfg.radius_fraction * diameter;
    let n = mesh.num_vertices();
    let mut values = DMatrix::zeros(n, DESCRIPTOR_DIM);
    if !(radius > 0.0) {
        return FeatureMap::new(values, "shot");
    }
    let points = mesh.vertices();
    let normals = mesh.vertex_normals();
    let grid = SpatialGrid::new(points, radius);
    let rows: Vec<[f64; DESCRIPTOR_DIM]> = (0..n)
        .into_par_iter()
        .map(|i| describe(i, points, normals, &grid.within(points, i, radius), radius))
        .collect();
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    FeatureMap::new(values, "shot")
}

const DSFT_MAGIC: &[u8; 4] = b"DSFT";
const DSFT_VERSION: u32 = 1;

/// `DSFT`: magic, version u32, n u64, L u64, f32 row-major values.
pub fn write_features(features: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let v = features.values();
    let mut w = Writer::default();
    w.bytes(DSFT_MAGIC);
    w.u32(DSFT_VERSION);
    w.u64(v.nrows() as u64);
    w.u64(v.ncols() as u64);
    for i in 0..v.nrows() {
        for x in v.row(i).iter() {
            w.f32(*x as f32);
        }
    }
    w.save(path)
}

pub fn read_features(path: impl AsRef<Path>, label: &str) -> Result<FeatureMap> {
    let mut r = Reader::open(path)?;
    r.magic(DSFT_MAGIC)?;
    let version = r.u32()?;
    if version != DSFT_VERSION {
        return Err(Error::Format(format!("DSFT version {version} unsupported")));
    }
    let n = r.u64()? as usize;
    let l = r.u64()? as usize;
    let bytes = n
        .checked_mul(l)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format("DSFT dimensions overflow".into()))?;
    r.expect_remaining(bytes)?;
    let mut values = DMatrix::zeros(n, l);
    for i in 0..n {
        for j in 0..l {
            values[(i, j)] = r.f32()? as f64;
        }
    }
    FeatureMap::new(values, label)
}
