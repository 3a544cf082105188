//! Synthetic test shapes.

use super::TriMesh;
use crate::error::{Error, Result};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Subdivided icosahedron projected onto a sphere of `radius`.
pub fn make_icosphere(subdivisions: usize, radius: f64) -> Result<TriMesh> {
    if subdivisions > 6 {
        return Err(Error::InvalidArgument(format!(
            "subdivisions must be in [0, 6], got {subdivisions}"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::from(*p).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = if a < b { (a, b) } else { (b, a) };
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut verts);
            let bc = midpoint(f[1], f[2], &mut verts);
            let ca = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let verts = verts.into_iter().map(|v| v * radius).collect();
    TriMesh::new(verts, faces)
}

/// Closed torus with `major × minor` vertices.
pub fn make_torus(major: usize, minor: usize, major_radius: f64, minor_radius: f64) -> Result<TriMesh> {
    if major < 3 || minor < 3 {
        return Err(Error::InvalidArgument("torus needs at least 3×3 segments".into()));
    }
    let tau = std::f64::consts::TAU;
    let mut verts = Vec::with_capacity(major * minor);
    for i in 0..major {
        let u = tau * i as f64 / major as f64;
        for j in 0..minor {
            let v = tau * j as f64 / minor as f64;
            let r = major_radius + minor_radius * v.cos();
            verts.push(Vector3::new(r * u.cos(), r * u.sin(), minor_radius * v.sin()));
        }
    }
    let idx = |i: usize, j: usize| (i % major) * minor + (j % minor);
    let mut faces = Vec::with_capacity(2 * major * minor);
    for i in 0..major {
        for j in 0..minor {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriMesh::new(verts, faces)
}

/// Displaces every vertex by a smooth trigonometric field of its ambient
/// position. Each displacement component is a mix of three plane waves
/// whose wavelength is on the order of the shape's extent, so the
/// result is a near-isometric, low-frequency deformation. `amplitude`
/// bounds the per-component displacement and must not exceed
/// 0.2·sqrt(area).
pub fn deform_lowfreq(mesh: &TriMesh, seed: u64, amplitude: f64) -> Result<TriMesh> {
    let limit = 0.2 * mesh.total_area().sqrt();
    if !(amplitude >= 0.0) || amplitude > limit {
        return Err(Error::InvalidArgument(format!(
            "amplitude {amplitude} outside [0, {limit}]"
        )));
    }
    if amplitude == 0.0 {
        return Ok(mesh.clone());
    }
    let centroid = mesh.centroid();
    let extent = mesh
        .vertices()
        .iter()
        .map(|v| (v - centroid).norm())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const WAVES: usize = 3;
    // per output component: WAVES × (direction, frequency, phase, weight)
    let mut waves = Vec::with_capacity(3 * WAVES);
    for _ in 0..3 * WAVES {
        let mut dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if dir.norm() < 1e-3 {
            dir = Vector3::x();
        }
        let freq = rng.random_range(0.5..1.5) / extent;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let weight = rng.random_range(-1.0..1.0) / WAVES as f64;
        waves.push((dir.normalize() * freq, phase, weight));
    }
    let verts = mesh
        .vertices()
        .iter()
        .map(|v| {
            let p = v - centroid;
            let mut d = Vector3::zeros();
            for c in 0..3 {
                d[c] = waves[c * WAVES..(c + 1) * WAVES]
                    .iter()
                    .map(|(k, phase, w)| w * (k.dot(&p) + phase).sin())
                    .sum::<f64>();
            }
            v + d * amplitude
        })
        .collect();
    mesh.with_vertices(verts)
}

/// Randomly relabels vertices (and shuffles triangle order).
/// `perm[old] = new`.
pub fn permute_vertices(mesh: &TriMesh, seed: u64) -> (TriMesh, Vec<usize>) {
    let n = mesh.num_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut verts = vec![Vector3::zeros(); n];
    for (old, &new) in perm.iter().enumerate() {
        verts[new] = mesh.vertices()[old];
    }
    let mut tris: Vec<[usize; 3]> = mesh
        .triangles()
        .iter()
        .map(|t| [perm[t[0]], perm[t[1]], perm[t[2]]])
        .collect();
    tris.shuffle(&mut rng);
    let out = TriMesh::new(verts, tris).expect("permutation keeps mesh valid");
    (out, perm)
}
