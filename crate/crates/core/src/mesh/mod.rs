//! Triangle meshes: ingestion, differential quantities, normalization,
//! edge-graph geodesics and synthetic test shapes.

mod generate;
pub(crate) mod geodesic;
mod io;

pub use generate::{deform_lowfreq, make_icosphere, make_torus, permute_vertices};
pub use geodesic::{all_pairs_geodesics, geodesic_distances, GeodesicField};
pub use io::{load_mesh, write_off, LoadedMesh, MeshFormat};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, Vector3};

/// Square root of the surface area every input is scaled to.
pub const TARGET_SQRT_AREA: f64 = 2.0 / 3.0;

/// An immutable triangle mesh with lumped vertex areas and unit vertex normals.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
    vertex_areas: Vec<f64>,
    vertex_normals: Vec<Vector3<f64>>,
}

impl TriMesh {
    /// Builds a mesh and derives areas and normals. Triangles must be
    /// in range and must not repeat a vertex.
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, len: n });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} repeats a vertex: {tri:?}"
                )));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        let vertex_areas = lumped_areas(&vertices, &triangles);
        let vertex_normals = vertex_normals(&vertices, &triangles);
        Ok(TriMesh {
            vertices,
            triangles,
            vertex_areas,
            vertex_normals,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn vertex_areas(&self) -> &[f64] {
        &self.vertex_areas
    }

    pub fn vertex_normals(&self) -> &[Vector3<f64>] {
        &self.vertex_normals
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn total_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| triangle_area(&self.vertices, t))
            .sum()
    }

    /// Area-weighted centroid under the lumped mass.
    pub fn centroid(&self) -> Vector3<f64> {
        let total: f64 = self.vertex_areas.iter().sum();
        let weighted = self
            .vertices
            .iter()
            .zip(&self.vertex_areas)
            .fold(Vector3::zeros(), |acc, (v, a)| acc + v * *a);
        weighted / total
    }

    /// Vertex coordinates as an n×3 matrix.
    pub fn coords_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.vertices.len(), 3, |i, j| self.vertices[i][j])
    }

    pub fn normals_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.vertices.len(), 3, |i, j| self.vertex_normals[i][j])
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| {
                [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                    .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Edges shared by more than two triangles.
    pub fn non_manifold_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| {
                [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                    .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            })
            .collect();
        edges.sort_unstable();
        let mut out = Vec::new();
        let mut i = 0;
        while i < edges.len() {
            let mut j = i;
            while j < edges.len() && edges[j] == edges[i] {
                j += 1;
            }
            if j - i > 2 {
                out.push(edges[i]);
            }
            i = j;
        }
        out
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Result<TriMesh> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        TriMesh::new(vertices, self.triangles.clone())
    }

    /// Returns a copy translated by `offset`.
    pub fn translated(&self, offset: Vector3<f64>) -> TriMesh {
        let vertices = self.vertices.iter().map(|v| v + offset).collect();
        TriMesh::new(vertices, self.triangles.clone()).expect("translation keeps mesh valid")
    }

    /// Returns a copy with every coordinate multiplied by `s`.
    pub fn scaled(&self, s: f64) -> TriMesh {
        let vertices = self.vertices.iter().map(|v| v * s).collect();
        TriMesh::new(vertices, self.triangles.clone()).expect("scaling keeps mesh valid")
    }

    /// Applies a linear map (e.g. a rotation) to every vertex.
    pub fn transformed(&self, m: &nalgebra::Matrix3<f64>) -> TriMesh {
        let vertices = self.vertices.iter().map(|v| m * v).collect();
        TriMesh::new(vertices, self.triangles.clone()).expect("linear map keeps mesh valid")
    }

    /// Largest distance between any two vertices. Exact up to 5000
    /// vertices, farthest-point sweeps with 8 restarts above.
    pub fn diameter(&self) -> f64 {
        let v = &self.vertices;
        if v.len() <= 5000 {
            use rayon::prelude::*;
            return (0..v.len())
                .into_par_iter()
                .map(|i| {
                    v[i + 1..]
                        .iter()
                        .map(|w| (v[i] - w).norm())
                        .fold(0.0, f64::max)
                })
                .reduce(|| 0.0, f64::max);
        }
        let farthest = |from: usize| -> (usize, f64) {
            v.iter()
                .enumerate()
                .map(|(j, w)| (j, (v[from] - w).norm()))
                .fold((from, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best })
        };
        let mut best = 0.0f64;
        let stride = v.len() / 8;
        for r in 0..8 {
            let mut cur = r * stride;
            for _ in 0..4 {
                let (next, d) = farthest(cur);
                best = best.max(d);
                if next == cur {
                    break;
                }
                cur = next;
            }
        }
        best
    }
}

fn triangle_area(v: &[Vector3<f64>], t: &[usize; 3]) -> f64 {
    0.5 * (v[t[1]] - v[t[0]]).cross(&(v[t[2]] - v[t[0]])).norm()
}

fn lumped_areas(v: &[Vector3<f64>], triangles: &[[usize; 3]]) -> Vec<f64> {
    let mut areas = vec![0.0; v.len()];
    for t in triangles {
        let a = triangle_area(v, t) / 3.0;
        for &i in t {
            areas[i] += a;
        }
    }
    areas
}

/// Unit vertex normals from area-weighted face normals.
///
/// A vertex whose weighted sum vanishes falls back to the mean of the
/// unit normals of its nonzero-area faces, and to +z if there are none.
pub fn vertex_normals(v: &[Vector3<f64>], triangles: &[[usize; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); v.len()];
    for t in triangles {
        let c = (v[t[1]] - v[t[0]]).cross(&(v[t[2]] - v[t[0]]));
        for &i in t {
            acc[i] += c;
        }
    }
    let mut fallback: Option<Vec<Vector3<f64>>> = None;
    let mut out = Vec::with_capacity(v.len());
    for (i, a) in acc.iter().enumerate() {
        let norm = a.norm();
        if norm > f64::MIN_POSITIVE {
            out.push(a / norm);
            continue;
        }
        let fb = fallback.get_or_insert_with(|| {
            let mut sums = vec![Vector3::zeros(); v.len()];
            for t in triangles {
                let c = (v[t[1]] - v[t[0]]).cross(&(v[t[2]] - v[t[0]]));
                let n = c.norm();
                if n > 0.0 {
                    for &k in t {
                        sums[k] += c / n;
                    }
                }
            }
            sums
        });
        let s = fb[i];
        if s.norm() > 1e-12 {
            out.push(s.normalize());
        } else {
            out.push(Vector3::z());
        }
    }
    out
}

/// Vertex normals for coordinates stored as an n×3 matrix.
pub fn vertex_normals_matrix(coords: &DMatrix<f64>, triangles: &[[usize; 3]]) -> DMatrix<f64> {
    let v: Vec<Vector3<f64>> = (0..coords.nrows())
        .map(|i| Vector3::new(coords[(i, 0)], coords[(i, 1)], coords[(i, 2)]))
        .collect();
    let n = vertex_normals(&v, triangles);
    DMatrix::from_fn(n.len(), 3, |i, j| n[i][j])
}

/// A mesh scaled to sqrt-area 2/3 and centred at its area-weighted centroid.
#[derive(Debug, Clone)]
pub struct NormalizedMesh {
    pub mesh: TriMesh,
    /// Multiplier applied after centring.
    pub scale: f64,
    /// Centroid that was subtracted.
    pub centroid: Vector3<f64>,
}

impl NormalizedMesh {
    /// Maps normalized coordinates back to the input frame.
    pub fn unnormalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p / self.scale + self.centroid
    }
}

pub fn normalize_mesh(mesh: &TriMesh) -> Result<NormalizedMesh> {
    normalize_mesh_to(mesh, TARGET_SQRT_AREA)
}

/// Centres `mesh` and scales it to `sqrt(area) = target`.
pub fn normalize_mesh_to(mesh: &TriMesh, target: f64) -> Result<NormalizedMesh> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("target sqrt-area must be positive, got {target}")));
    }
    let area = mesh.total_area();
    if !(area > 0.0) {
        return Err(Error::ZeroArea);
    }
    let centroid = mesh.centroid();
    let scale = target / area.sqrt();
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| (v - centroid) * scale)
        .collect();
    Ok(NormalizedMesh {
        mesh: TriMesh::new(vertices, mesh.triangles.clone())?,
        scale,
        centroid,
    })
}

/// Relabels vertices in lexicographic order of their coordinates and lists
/// triangles sorted, each rotated to start at its smallest index.
/// Returns the relabeled mesh and `perm[old] = new`. Meshes that differ
/// only in labeling have bitwise identical canonical forms, provided no two
/// vertices share a position.
pub fn canonical_form(mesh: &TriMesh) -> (TriMesh, Vec<usize>) {
    let v = mesh.vertices();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| {
        v[a].x
            .total_cmp(&v[b].x)
            .then(v[a].y.total_cmp(&v[b].y))
            .then(v[a].z.total_cmp(&v[b].z))
            .then(a.cmp(&b))
    });
    let mut perm = vec![0; v.len()];
    for (new, &old) in order.iter().enumerate() {
        perm[old] = new;
    }
    let vertices = order.iter().map(|&old| v[old]).collect();
    let mut triangles: Vec<[usize; 3]> = mesh
        .triangles()
        .iter()
        .map(|t| {
            let t = [perm[t[0]], perm[t[1]], perm[t[2]]];
            let r = (0..3).min_by_key(|&i| t[i]).unwrap();
            [t[r], t[(r + 1) % 3], t[(r + 2) % 3]]
        })
        .collect();
    triangles.sort_unstable();
    let out = TriMesh::new(vertices, triangles).expect("relabeling keeps mesh valid");
    (out, perm)
}
