//! Cotangent Laplace–Beltrami operator, truncated eigenbasis and the
//! smoothed product embedding.

mod cache;
mod lanczos;

pub use cache::{mesh_hash, read_basis, write_basis};

use crate::error::{Error, Result};
use crate::mesh::{vertex_normals_matrix, TriMesh};
use faer::linalg::evd;
use nalgebra::{DMatrix, DVector};
use sprs::{CsMat, TriMat};

/// Above this vertex count the eigenbasis is computed by shift-invert
/// Lanczos instead of a dense symmetric solve.
pub const DENSE_EIGEN_LIMIT: usize = 4000;

/// Stiffness (cotangent weights) and lumped mass.
#[derive(Debug, Clone)]
pub struct LaplacianPair {
    pub stiffness: CsMat<f64>,
    pub mass: DVector<f64>,
}

impl LaplacianPair {
    pub fn size(&self) -> usize {
        self.mass.len()
    }

    pub fn stiffness_dense(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut d = DMatrix::zeros(n, n);
        for (v, (i, j)) in self.stiffness.iter() {
            d[(i, j)] += *v;
        }
        d
    }

    /// W·x for a dense vector.
    pub fn apply_stiffness(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (row, vec) in self.stiffness.outer_iterator().enumerate() {
            out[row] = vec.iter().map(|(c, v)| v * x[c]).sum();
        }
        out
    }
}

/// `W_ij = −(cot α_ij + cot β_ij)/2` off the diagonal, rows summing to zero,
/// and `M = diag(vertex areas)`. Obtuse angles give negative weights and are
/// kept; degenerate triangles contribute nothing.
pub fn build_laplacian(mesh: &TriMesh) -> LaplacianPair {
    let n = mesh.num_vertices();
    let v = mesh.vertices();
    let mut tri = TriMat::new((n, n));
    let mut diag = vec![0.0; n];
    let mut degenerate = 0usize;
    for t in mesh.triangles() {
        for c in 0..3 {
            // angle at corner c is opposite edge (a, b)
            let (k, a, b) = (t[c], t[(c + 1) % 3], t[(c + 2) % 3]);
            let ea = v[a] - v[k];
            let eb = v[b] - v[k];
            let cross = ea.cross(&eb).norm();
            if !(cross > 0.0) {
                degenerate += 1;
                continue;
            }
            let w = 0.5 * ea.dot(&eb) / cross;
            tri.add_triplet(a, b, -w);
            tri.add_triplet(b, a, -w);
            diag[a] += w;
            diag[b] += w;
        }
    }
    if degenerate > 0 {
        log::warn!("{} zero-area triangle corners skipped in Laplacian", degenerate / 3);
    }
    for (i, d) in diag.iter().enumerate() {
        tri.add_triplet(i, i, *d);
    }
    LaplacianPair {
        stiffness: tri.to_csr(),
        mass: DVector::from_column_slice(mesh.vertex_areas()),
    }
}

/// Truncated generalized eigenpairs `W φ = λ M φ`, mass-orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralBasis {
    pub fn new(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        if eigenvalues.len() != eigenvectors.ncols() {
            return Err(Error::Dimension(format!(
                "{} eigenvalues for {} eigenvectors",
                eigenvalues.len(),
                eigenvectors.ncols()
            )));
        }
        Ok(SpectralBasis {
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Basis size K.
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn num_vertices(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// First `k` eigenvectors as an n×k matrix.
    pub fn truncated(&self, k: usize) -> DMatrix<f64> {
        self.eigenvectors.columns(0, k).into_owned()
    }

    /// Keeps the first `k` pairs.
    pub fn truncate(&self, k: usize) -> SpectralBasis {
        let k = k.min(self.len());
        SpectralBasis {
            eigenvalues: self.eigenvalues.rows(0, k).into_owned(),
            eigenvectors: self.truncated(k),
        }
    }
}

/// The `count` smallest eigenpairs in ascending order, signed by
/// [`fix_signs`]. Within a repeated eigenvalue the basis is whatever the
/// solver returns.
pub fn eigendecompose(lap: &LaplacianPair, count: usize) -> Result<SpectralBasis> {
    let n = lap.size();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "requested {count} eigenpairs of a {n}-vertex Laplacian"
        )));
    }
    if lap.mass.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidMesh(
            "lumped mass must be strictly positive (isolated or zero-area vertex)".into(),
        ));
    }
    let (values, mut vectors) = if n <= DENSE_EIGEN_LIMIT {
        dense_eigen(lap, count)?
    } else {
        lanczos::shift_invert(lap, count)?
    };
    fix_signs(&mut vectors);
    let basis = SpectralBasis::new(values, vectors)?;
    let worst = max_relative_residual(lap, &basis);
    if worst > 1.0 {
        return Err(Error::EigenNoConvergence { residual: worst });
    }
    Ok(basis)
}

fn dense_eigen(lap: &LaplacianPair, count: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = lap.size();
    let inv_sqrt: Vec<f64> = lap.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut s = faer::Mat::<f64>::zeros(n, n);
    for (v, (i, j)) in lap.stiffness.iter() {
        s[(i, j)] += *v * inv_sqrt[i] * inv_sqrt[j];
    }
    // exact symmetry for the solver
    let s = faer::Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let mut lambda = faer::diag::Diag::<f64>::zeros(n);
    let mut u = faer::Mat::<f64>::zeros(n, n);
    // sequential so results do not depend on the thread count
    let par = faer::Par::Seq;
    let mut scratch = faer::dyn_stack::MemBuffer::new(evd::self_adjoint_evd_scratch::<f64>(
        n,
        evd::ComputeEigenvectors::Yes,
        par,
        Default::default(),
    ));
    evd::self_adjoint_evd(
        s.as_ref(),
        lambda.as_mut(),
        Some(u.as_mut()),
        par,
        faer::dyn_stack::MemStack::new(&mut scratch),
        Default::default(),
    )
    .map_err(|_| Error::EigenNoConvergence { residual: f64::INFINITY })?;
    let lambda = lambda.column_vector();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lambda[a].total_cmp(&lambda[b]));
    let values = DVector::from_iterator(count, order[..count].iter().map(|&i| lambda[i]));
    let vectors = DMatrix::from_fn(n, count, |r, c| u[(r, order[c])] * inv_sqrt[r]);
    Ok((values, vectors))
}

/// Relative margin within which entries count as tied for the largest magnitude.
const SIGN_TIE_TOL: f64 = 1e-6;

/// Makes the entry of largest magnitude in each column positive; among
/// entries tied up to [`SIGN_TIE_TOL`] the lowest vertex index decides.
pub fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let largest = col.amax();
        let lead = col.iter().position(|v| v.abs() >= (1.0 - SIGN_TIE_TOL) * largest);
        if let Some(i) = lead {
            if col[i] < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Worst eigen-residual relative to its tolerance: each pair must satisfy
/// `‖W φ − λ M φ‖ ≤ 1e-7·‖W φ‖ + 1e-12·‖W‖_∞·‖φ‖`, so values ≤ 1 pass.
pub fn max_relative_residual(lap: &LaplacianPair, basis: &SpectralBasis) -> f64 {
    let mut row_sums = vec![0.0f64; lap.size()];
    for (v, (i, _)) in lap.stiffness.iter() {
        row_sums[i] += v.abs();
    }
    let w_norm = row_sums.into_iter().fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (i, col) in basis.eigenvectors.column_iter().enumerate() {
        let x: Vec<f64> = col.iter().copied().collect();
        let wx = lap.apply_stiffness(&x);
        let lam = basis.eigenvalues[i];
        let res: f64 = wx
            .iter()
            .zip(&x)
            .zip(lap.mass.iter())
            .map(|((w, x), m)| (w - lam * m * x).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = wx.iter().map(|w| w * w).sum::<f64>().sqrt();
        let floor = 1e-12 * w_norm * col.norm();
        worst = worst.max(res / (1e-7 * scale + floor));
    }
    worst
}

/// Per-vertex product embedding `(Φ_k | X_k | n_k)` with `k + 6` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductEmbedding {
    k: usize,
    coords: DMatrix<f64>,
}

impl ProductEmbedding {
    /// Assembles the embedding from its three blocks.
    pub fn from_blocks(spectral: &DMatrix<f64>, coords: &DMatrix<f64>, normals: &DMatrix<f64>) -> Result<Self> {
        let n = spectral.nrows();
        if coords.nrows() != n || normals.nrows() != n || coords.ncols() != 3 || normals.ncols() != 3 {
            return Err(Error::Dimension("embedding blocks disagree in shape".into()));
        }
        let k = spectral.ncols();
        let mut all = DMatrix::zeros(n, k + 6);
        all.columns_mut(0, k).copy_from(spectral);
        all.columns_mut(k, 3).copy_from(coords);
        all.columns_mut(k + 3, 3).copy_from(normals);
        Ok(ProductEmbedding { k, coords: all })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The full n×(k+6) matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn spectral(&self) -> DMatrix<f64> {
        self.coords.columns(0, self.k).into_owned()
    }

    pub fn coords(&self) -> DMatrix<f64> {
        self.coords.columns(self.k, 3).into_owned()
    }

    pub fn normals(&self) -> DMatrix<f64> {
        self.coords.columns(self.k + 3, 3).into_owned()
    }

    /// Copy with the spectral, coordinate and normal blocks scaled by the
    /// square roots of `weights`, so squared distances are weighted sums.
    pub fn weighted(&self, weights: [f64; 3]) -> DMatrix<f64> {
        let mut m = self.coords.clone();
        let k = self.k;
        m.columns_mut(0, k).scale_mut(weights[0].sqrt());
        m.columns_mut(k, 3).scale_mut(weights[1].sqrt());
        m.columns_mut(k + 3, 3).scale_mut(weights[2].sqrt());
        m
    }
}

/// `Φᵀ M s`, the mass-weighted analysis transform.
pub fn spectral_coeffs(basis: &SpectralBasis, mass: &DVector<f64>, signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if signal.nrows() != basis.num_vertices() || mass.len() != basis.num_vertices() {
        return Err(Error::Dimension(format!(
            "signal has {} rows, basis has {} vertices",
            signal.nrows(),
            basis.num_vertices()
        )));
    }
    let mut weighted = signal.clone();
    for (mut row, m) in weighted.row_iter_mut().zip(mass.iter()) {
        row *= *m;
    }
    Ok(basis.eigenvectors.tr_mul(&weighted))
}

/// `Φ c`, inverse of [`spectral_coeffs`] on the span of the basis.
pub fn synthesize(basis: &SpectralBasis, coeffs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if coeffs.nrows() != basis.len() {
        return Err(Error::Dimension(format!(
            "{} coefficients for a basis of size {}",
            coeffs.nrows(),
            basis.len()
        )));
    }
    Ok(&basis.eigenvectors * coeffs)
}

/// `Φ_k Φ_kᵀ M s`, projection onto the first `k` eigenfunctions.
pub fn low_pass(basis: &SpectralBasis, mass: &DVector<f64>, k: usize, signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k == 0 || k > basis.len() {
        return Err(Error::InvalidArgument(format!(
            "level k={k} outside [1, {}]",
            basis.len()
        )));
    }
    let truncated = basis.truncate(k);
    let c = spectral_coeffs(&truncated, mass, signal)?;
    synthesize(&truncated, &c)
}

/// Smoothed product embedding at detail level `k`: eigenfunctions, low-pass
/// coordinates, and normals recomputed from the smoothed coordinates.
pub fn smooth_embed(mesh: &TriMesh, basis: &SpectralBasis, k: usize) -> Result<ProductEmbedding> {
    if basis.num_vertices() != mesh.num_vertices() {
        return Err(Error::Dimension("basis and mesh vertex counts differ".into()));
    }
    let mass = DVector::from_column_slice(mesh.vertex_areas());
    let smoothed = low_pass(basis, &mass, k, &mesh.coords_matrix())?;
    let normals = vertex_normals_matrix(&smoothed, mesh.triangles());
    ProductEmbedding::from_blocks(&basis.truncated(k), &smoothed, &normals)
}
