//! Shift-invert Lanczos for the smallest generalized eigenpairs of large
//! meshes, with full reorthogonalization in the mass inner product.

use super::LaplacianPair;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprs::{FillInReduction, TriMat};
use sprs_ldl::Ldl;

pub(super) fn shift_invert(lap: &LaplacianPair, count: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = lap.size();
    let mass = lap.mass.as_slice();
    // W + σM is positive definite for σ > 0; σ sits well below λ_2.
    let diag_ratio: f64 = lap
        .stiffness
        .outer_iterator()
        .enumerate()
        .map(|(i, row)| row.get(i).copied().unwrap_or(0.0) / mass[i])
        .sum::<f64>()
        / n as f64;
    let sigma = 1e-2 * diag_ratio / n as f64;
    let mut shifted = TriMat::new((n, n));
    for (v, (i, j)) in lap.stiffness.iter() {
        shifted.add_triplet(i, j, *v);
    }
    for (i, m) in mass.iter().enumerate() {
        shifted.add_triplet(i, i, sigma * m);
    }
    let shifted = shifted.to_csc::<usize>();
    let ldl = Ldl::new()
        .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
        .numeric(shifted.view())
        .map_err(|e| Error::NonFinite(format!("factorization of shifted Laplacian failed: {e}")))?;

    let m_dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(mass).map(|((x, y), m)| x * y * m).sum() };

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();

    let random_unit = |rng: &mut ChaCha8Rng, basis: &[Vec<f64>]| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        reorthogonalize(&mut v, basis, mass);
        let nrm = m_dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= nrm);
        v
    };

    basis.push(random_unit(&mut rng, &basis));
    let mut steps = (2 * count + 40).min(n);
    loop {
        while basis.len() <= steps && basis.len() <= n {
            let j = basis.len() - 1;
            let q = &basis[j];
            let mq: Vec<f64> = q.iter().zip(mass).map(|(x, m)| x * m).collect();
            let mut w: Vec<f64> = ldl.solve(&mq);
            let a = m_dot(q, &w);
            for (wi, qi) in w.iter_mut().zip(q) {
                *wi -= a * qi;
            }
            if j > 0 {
                let b = beta[j - 1];
                for (wi, pi) in w.iter_mut().zip(&basis[j - 1]) {
                    *wi -= b * pi;
                }
            }
            reorthogonalize(&mut w, &basis, mass);
            alpha.push(a);
            let b = m_dot(&w, &w).sqrt();
            if basis.len() == n {
                break;
            }
            if b < 1e-12 * a.abs().max(1e-300) {
                // invariant subspace found: continue from a fresh direction
                beta.push(0.0);
                let fresh = random_unit(&mut rng, &basis);
                basis.push(fresh);
            } else {
                beta.push(b);
                basis.push(w.into_iter().map(|x| x / b).collect());
            }
        }
        let m = alpha.len();
        let mut t = DMatrix::zeros(m, m);
        for i in 0..m {
            t[(i, i)] = alpha[i];
            if i + 1 < m {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut order: Vec<usize> = (0..m).collect();
        // largest θ = 1/(λ+σ) first
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let take = count.min(m);
        let mut values = DVector::zeros(take);
        let mut vectors = DMatrix::zeros(n, take);
        for (c, &idx) in order[..take].iter().enumerate() {
            values[c] = 1.0 / eig.eigenvalues[idx] - sigma;
            for (k, q) in basis[..m].iter().enumerate() {
                let s = eig.eigenvectors[(k, idx)];
                if s != 0.0 {
                    for (r, x) in q.iter().enumerate() {
                        vectors[(r, c)] += s * x;
                    }
                }
            }
        }
        let candidate = super::SpectralBasis::new(values.clone(), vectors.clone())?;
        let worst = super::max_relative_residual(lap, &candidate);
        if (worst <= 1.0 && take == count) || m >= n {
            if worst > 1.0 {
                return Err(Error::EigenNoConvergence { residual: worst });
            }
            return Ok((values, vectors));
        }
        log::debug!("lanczos: {m} steps, worst residual ratio {worst:.3e}; extending");
        steps = (steps * 3 / 2).min(n);
    }
}

/// Two passes of classical Gram–Schmidt against `basis` in the M inner product.
fn reorthogonalize(v: &mut [f64], basis: &[Vec<f64>], mass: &[f64]) {
    use rayon::prelude::*;
    for _ in 0..2 {
        let mv: Vec<f64> = v.iter().zip(mass).map(|(x, m)| x * m).collect();
        let coeffs: Vec<f64> = basis
            .par_iter()
            .map(|q| q.iter().zip(&mv).map(|(a, b)| a * b).sum())
            .collect();
        v.par_iter_mut().enumerate().for_each(|(r, x)| {
            let mut acc = 0.0;
            for (q, c) in basis.iter().zip(&coeffs) {
                acc += c * q[r];
            }
            *x -= acc;
        });
    }
}
