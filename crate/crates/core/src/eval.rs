//! Correspondence quality: normalized geodesic error curves and per-triangle
//! conformal distortion.

use crate::error::{Error, Result};
use crate::mesh::geodesic::EdgeGraph;
use crate::mesh::TriMesh;
use crate::transport::HardCorrespondence;
use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const ERROR_THRESHOLDS: usize = 200;
pub const ERROR_MAX_THRESHOLD: f64 = 0.25;
pub const DISTORTION_THRESHOLDS: usize = 200;
pub const DISTORTION_MAX_THRESHOLD: f64 = 5.0;
/// Value assigned to triangles whose image is degenerate.
pub const DISTORTION_CAP: f64 = 1e6;

/// Length that geodesic errors are divided by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    #[default]
    SqrtArea,
    Diameter,
}

/// `count` evenly spaced values from `lo` to `hi` inclusive.
fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Fraction of `sorted` values `≤ t` for every threshold.
fn cumulative(sorted: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = sorted.len().max(1) as f64;
    thresholds
        .iter()
        .map(|t| sorted.partition_point(|v| v <= t) as f64 / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    pub mean_error: f64,
    /// Normalized error of every source vertex.
    pub errors: Vec<f64>,
}

impl ErrorCurve {
    /// Builds the curve on the default grid of 200 thresholds in `[0, 0.25]`.
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::InvalidArgument("no errors to summarize".into()));
        }
        if errors.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::NonFinite("geodesic error".into()));
        }
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let thresholds = linspace(0.0, ERROR_MAX_THRESHOLD, ERROR_THRESHOLDS);
        let fractions = cumulative(&sorted, &thresholds);
        let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
        Ok(ErrorCurve {
            thresholds,
            fractions,
            mean_error,
            errors,
        })
    }

    /// Pools the per-vertex errors of several curves.
    pub fn pooled(curves: &[ErrorCurve]) -> Result<Self> {
        ErrorCurve::from_errors(curves.iter().flat_map(|c| c.errors.iter().copied()).collect())
    }

    /// Trapezoid integral of `1 − fraction`, continuing the grid spacing up
    /// to the largest observed error. Equals `mean_error` up to half a grid
    /// step.
    pub fn tail_integral(&self) -> f64 {
        let step = self.thresholds[1] - self.thresholds[0];
        let max = self.errors.iter().copied().fold(0.0, f64::max);
        let mut sorted = self.errors.clone();
        sorted.sort_by(f64::total_cmp);
        let steps = (max / step).ceil() as usize + 1;
        let grid: Vec<f64> = (0..=steps).map(|i| i as f64 * step).collect();
        let frac = cumulative(&sorted, &grid);
        frac.windows(2).map(|w| step * (2.0 - w[0] - w[1]) / 2.0).sum()
    }

    /// CSV `threshold,fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            writeln!(out, "{t},{f}").unwrap();
        }
        out
    }
}

fn check_map(map: &HardCorrespondence, len: usize, range: usize, what: &str) -> Result<()> {
    if map.len() != len {
        return Err(Error::Dimension(format!(
            "{what} has {} entries, expected {len}",
            map.len()
        )));
    }
    if let Some(&bad) = map.as_slice().iter().find(|&&j| j >= range) {
        return Err(Error::IndexOutOfRange { index: bad, len: range });
    }
    Ok(())
}

/// Edge-graph geodesic distance on `mesh_y` between predicted and true
/// targets, divided by `sqrt(area(Y))` or the diameter of Y.
/// Unreachable pairs fall back to the diameter.
pub fn geodesic_error(
    mesh_y: &TriMesh,
    predicted: &HardCorrespondence,
    ground_truth: &HardCorrespondence,
    norm: ErrorNorm,
) -> Result<ErrorCurve> {
    let ny = mesh_y.num_vertices();
    check_map(ground_truth, predicted.len(), ny, "ground truth")?;
    check_map(predicted, predicted.len(), ny, "prediction")?;
    let diameter = mesh_y.diameter();
    let scale = match norm {
        ErrorNorm::SqrtArea => mesh_y.total_area().sqrt(),
        ErrorNorm::Diameter => diameter,
    };
    let mut by_source: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, (&p, &t)) in predicted.as_slice().iter().zip(ground_truth.as_slice()).enumerate() {
        if p != t {
            by_source.entry(t).or_default().push(i);
        }
    }
    let graph = EdgeGraph::new(mesh_y);
    let sources: Vec<(usize, Vec<usize>)> = by_source.into_iter().collect();
    let distances: Vec<(usize, f64)> = sources
        .par_iter()
        .flat_map_iter(|(source, rows)| {
            let field = graph.dijkstra(*source);
            rows.iter()
                .map(|&i| (i, field[predicted.as_slice()[i]]))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut errors = vec![0.0; predicted.len()];
    let mut unreachable = 0;
    for (i, d) in distances {
        errors[i] = if d.is_finite() {
            d / scale
        } else {
            unreachable += 1;
            diameter / scale
        };
    }
    if unreachable > 0 {
        log::warn!("{unreachable} predicted targets are disconnected from their ground truth");
    }
    ErrorCurve::from_errors(errors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionCurve {
    /// One value per non-degenerate source triangle, in triangle order.
    pub values: Vec<f64>,
    /// Source triangles left out for having no area.
    pub skipped: usize,
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl DistortionCurve {
    pub fn from_values(values: Vec<f64>, skipped: usize) -> Self {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let thresholds = linspace(2.0, DISTORTION_MAX_THRESHOLD, DISTORTION_THRESHOLDS);
        let fractions = cumulative(&sorted, &thresholds);
        DistortionCurve {
            values,
            skipped,
            thresholds,
            fractions,
        }
    }

    pub fn pooled(curves: &[DistortionCurve]) -> Self {
        DistortionCurve::from_values(
            curves.iter().flat_map(|c| c.values.iter().copied()).collect(),
            curves.iter().map(|c| c.skipped).sum(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// CSV `threshold,fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            writeln!(out, "{t},{f}").unwrap();
        }
        out
    }
}

/// Triangle corners in an orthonormal frame of its plane, as the columns
/// of an upper-triangular 2×2 matrix (first corner at the origin).
fn flatten(p: [Vector3<f64>; 3]) -> Matrix2<f64> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let len = e1.norm();
    if len == 0.0 {
        return Matrix2::zeros();
    }
    let u = e1 / len;
    let along = e2.dot(&u);
    let across = (e2 - u * along).norm();
    Matrix2::new(len, along, 0.0, across)
}

/// `σ1/σ2 + σ2/σ1` of the linear map taking flattened `src` to flattened
/// `dst`, via `‖J‖²_F / |det J|`.
fn mips(src: &Matrix2<f64>, dst: &Matrix2<f64>) -> f64 {
    let det_src = src.determinant();
    let det_dst = dst.determinant();
    // J = dst · src⁻¹ = dst · adj(src) / det(src)
    let adj = Matrix2::new(src[(1, 1)], -src[(0, 1)], -src[(1, 0)], src[(0, 0)]);
    let num = (dst * adj).norm_squared();
    let value = num / (det_src.abs() * det_dst.abs());
    if value.is_finite() {
        value.min(DISTORTION_CAP)
    } else {
        DISTORTION_CAP
    }
}

/// Conformal distortion of every X triangle under `map`, comparing each
/// triangle with the triangle spanned by the images of its corners.
pub fn conformal_distortion(mesh_x: &TriMesh, mesh_y: &TriMesh, map: &HardCorrespondence) -> Result<DistortionCurve> {
    check_map(map, mesh_x.num_vertices(), mesh_y.num_vertices(), "map")?;
    let (vx, vy) = (mesh_x.vertices(), mesh_y.vertices());
    let m = map.as_slice();
    let per_triangle: Vec<Option<f64>> = mesh_x
        .triangles()
        .par_iter()
        .map(|t| {
            let src = flatten([vx[t[0]], vx[t[1]], vx[t[2]]]);
            let scale = src.norm_squared();
            if !(src.determinant().abs() > 1e-14 * scale) {
                return None;
            }
            let dst = flatten([vy[m[t[0]]], vy[m[t[1]]], vy[m[t[2]]]]);
            Some(mips(&src, &dst))
        })
        .collect();
    let skipped = per_triangle.iter().filter(|v| v.is_none()).count();
    if skipped > 0 {
        log::warn!("skipped {skipped} degenerate source triangles");
    }
    Ok(DistortionCurve::from_values(per_triangle.into_iter().flatten().collect(), skipped))
}

/// Reads a ground-truth or predicted map; the literal `identity` stands for
/// the identity on `n` vertices.
pub fn load_map(source: &str, n: usize) -> Result<HardCorrespondence> {
    if source == "identity" {
        return Ok(HardCorrespondence::identity(n));
    }
    let (map, _) = crate::shells::read_correspondence(Path::new(source))?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{all_pairs_geodesics, make_icosphere, make_torus, normalize_mesh};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_grid(nx: usize, ny: usize) -> TriMesh {
        let mut v = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                v.push(Vector3::new(i as f64, j as f64 + 0.3 * i as f64, 0.0));
            }
        }
        let id = |i: usize, j: usize| j * nx + i;
        let mut t = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                t.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                t.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriMesh::new(v, t).unwrap()
    }

    #[test]
    fn perfect_map_has_zero_error() {
        let m = make_icosphere(2, 1.0).unwrap();
        let id = HardCorrespondence::identity(m.num_vertices());
        let c = geodesic_error(&m, &id, &id, ErrorNorm::SqrtArea).unwrap();
        assert_eq!(c.mean_error, 0.0);
        assert_eq!(c.fractions[0], 1.0);
        assert_eq!(c.thresholds.len(), ERROR_THRESHOLDS);
        assert_eq!(*c.thresholds.last().unwrap(), ERROR_MAX_THRESHOLD);
    }

    #[test]
    fn single_neighbor_error_is_edge_over_sqrt_area() {
        let m = normalize_mesh(&make_icosphere(2, 1.0).unwrap()).unwrap().mesh;
        let (a, b) = m.edges()[0];
        let gt = HardCorrespondence::identity(m.num_vertices());
        let mut pred = gt.clone();
        pred.0[a] = b;
        let c = geodesic_error(&m, &pred, &gt, ErrorNorm::SqrtArea).unwrap();
        let edge = (m.vertices()[a] - m.vertices()[b]).norm();
        assert!((c.errors[a] - edge / (2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(c.errors.iter().filter(|e| **e > 0.0).count(), 1);
        let d = geodesic_error(&m, &pred, &gt, ErrorNorm::Diameter).unwrap();
        assert!((d.errors[a] - edge / m.diameter()).abs() < 1e-12);
    }

    #[test]
    fn random_maps_match_all_pairs_oracle() {
        let m = make_torus(12, 8, 1.0, 0.35).unwrap();
        let n = m.num_vertices();
        let all = all_pairs_geodesics(&m);
        let sa = m.total_area().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let pred = HardCorrespondence((0..n).map(|_| rng.random_range(0..n)).collect());
            let gt = HardCorrespondence((0..n).map(|_| rng.random_range(0..n)).collect());
            let c = geodesic_error(&m, &pred, &gt, ErrorNorm::SqrtArea).unwrap();
            let oracle: f64 = (0..n).map(|i| all[gt.0[i]][pred.0[i]] / sa).sum::<f64>() / n as f64;
            assert!((c.mean_error - oracle).abs() <= 1e-12);
            assert!((c.tail_integral() - c.mean_error).abs() <= 1e-3);
        }
    }

    #[test]
    fn rejects_bad_maps() {
        let m = make_icosphere(1, 1.0).unwrap();
        let id = HardCorrespondence::identity(m.num_vertices());
        let short = HardCorrespondence(vec![0, 1]);
        assert!(geodesic_error(&m, &short, &id, ErrorNorm::SqrtArea).is_err());
        let mut bad = id.clone();
        bad.0[0] = 999;
        assert!(matches!(
            geodesic_error(&m, &bad, &id, ErrorNorm::SqrtArea),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(conformal_distortion(&m, &m, &short).is_err());
    }

    #[test]
    fn identity_distortion_is_exactly_two() {
        let m = make_torus(9, 7, 1.0, 0.3).unwrap();
        let c = conformal_distortion(&m, &m, &HardCorrespondence::identity(m.num_vertices())).unwrap();
        assert_eq!(c.values.len(), m.num_triangles());
        assert!(c.values.iter().all(|v| *v == 2.0));
        assert_eq!(c.fractions[0], 1.0);
    }

    #[test]
    fn uniform_scale_and_stretch() {
        let m = flat_grid(5, 4);
        let id = HardCorrespondence::identity(m.num_vertices());
        let scaled = m.scaled(3.0);
        let c = conformal_distortion(&m, &scaled, &id).unwrap();
        assert!(c.values.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let stretch = m.transformed(&nalgebra::Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0)));
        let c = conformal_distortion(&m, &stretch, &id).unwrap();
        assert!(c.values.iter().all(|v| (v - 2.5).abs() < 1e-12), "{:?}", c.values);
    }

    #[test]
    fn collapsed_images_are_capped() {
        let m = flat_grid(3, 3);
        let map = HardCorrespondence(vec![0; m.num_vertices()]);
        let c = conformal_distortion(&m, &m, &map).unwrap();
        assert!(c.values.iter().all(|v| *v == DISTORTION_CAP));
        let mut v = m.vertices().to_vec();
        v[1] = v[0] + (v[4] - v[0]) * 0.5;
        let degenerate = TriMesh::new(v, m.triangles().to_vec()).unwrap();
        let c = conformal_distortion(&degenerate, &m, &HardCorrespondence::identity(9)).unwrap();
        assert_eq!(c.skipped, 1);
    }

    #[test]
    fn load_map_identity_token() {
        assert_eq!(load_map("identity", 3).unwrap(), HardCorrespondence::identity(3));
        assert!(load_map("/nonexistent/map.txt", 3).is_err());
    }

    proptest! {
        #[test]
        fn curves_are_monotone(errors in proptest::collection::vec(0.0f64..0.5, 1..60)) {
            let c = ErrorCurve::from_errors(errors).unwrap();
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
            prop_assert!((c.tail_integral() - c.mean_error).abs() <= 1e-3);
        }

        #[test]
        fn distortion_is_at_least_two(seed in 0u64..200) {
            let m = make_icosphere(1, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = m.num_vertices();
            let map = HardCorrespondence((0..n).map(|_| rng.random_range(0..n)).collect());
            let c = conformal_distortion(&m, &m, &map).unwrap();
            prop_assert!(c.values.iter().all(|v| *v >= 2.0 - 1e-12));
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
