//! Entropy-regularized optimal transport between two discrete surfaces.
//!
//! A coupling is never stored densely. It is represented by its dual
//! potentials `f`, `g` together with the cost it was solved on:
//!
//! ```text
//! π_ij = a_i b_j exp((f_i + g_j − c_ij) / λ)
//! ```
//!
//! All reductions are evaluated in the log domain.

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::path::Path;
use std::sync::Arc;

/// Rows processed per block when a coupling is materialized on the fly.
const ROW_BLOCK: usize = 128;

/// Probability weights of the two shapes (normalized vertex areas).
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalWeights {
    a: DVector<f64>,
    b: DVector<f64>,
    log_a: DVector<f64>,
    log_b: DVector<f64>,
}

impl MarginalWeights {
    /// Normalizes both weight vectors to unit sum. Entries must be positive.
    pub fn new(a: &[f64], b: &[f64]) -> Result<Self> {
        let norm = |w: &[f64], name: &str| -> Result<DVector<f64>> {
            if w.is_empty() {
                return Err(Error::InvalidArgument(format!("marginal {name} is empty")));
            }
            if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "marginal {name} must be strictly positive and finite"
                )));
            }
            let s: f64 = w.iter().sum();
            Ok(DVector::from_iterator(w.len(), w.iter().map(|x| x / s)))
        };
        let a = norm(a, "a")?;
        let b = norm(b, "b")?;
        let log_a = a.map(f64::ln);
        let log_b = b.map(f64::ln);
        Ok(MarginalWeights { a, b, log_a, log_b })
    }

    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        MarginalWeights::new(&vec![1.0; n], &vec![1.0; m])
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn log_a(&self) -> &DVector<f64> {
        &self.log_a
    }

    pub fn log_b(&self) -> &DVector<f64> {
        &self.log_b
    }

    /// Same weights with the roles of the two shapes exchanged.
    pub fn swapped(&self) -> MarginalWeights {
        MarginalWeights {
            a: self.b.clone(),
            b: self.a.clone(),
            log_a: self.log_b.clone(),
            log_b: self.log_a.clone(),
        }
    }
}

/// Dense pairwise cost `c_ij ≥ 0` between the vertices of X (rows) and Y.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    c: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() == 0 || c.ncols() == 0 {
            return Err(Error::Dimension("empty cost matrix".into()));
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cost matrix entry".into()));
        }
        Ok(CostMatrix { c })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.c
    }

    pub fn shape(&self) -> (usize, usize) {
        self.c.shape()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            c: self.c.transpose(),
        }
    }
}

/// Squared Euclidean distances between the rows of `ex` and `ey`.
pub fn embedding_cost(ex: &DMatrix<f64>, ey: &DMatrix<f64>) -> Result<CostMatrix> {
    if ex.ncols() != ey.ncols() {
        return Err(Error::Dimension(format!(
            "embeddings have {} and {} columns",
            ex.ncols(),
            ey.ncols()
        )));
    }
    if ex.ncols() == 0 {
        return Err(Error::Dimension("embedding dimension is zero".into()));
    }
    CostMatrix::new(pairwise_sq_dist(ex, ey))
}

/// `‖x_i‖² + ‖y_j‖² − 2 x_i·y_j`, clamped at zero against cancellation.
pub(crate) fn pairwise_sq_dist(ex: &DMatrix<f64>, ey: &DMatrix<f64>) -> DMatrix<f64> {
    let nx: Vec<f64> = ex.row_iter().map(|r| r.norm_squared()).collect();
    let ny: Vec<f64> = ey.row_iter().map(|r| r.norm_squared()).collect();
    let mut c = ex * ey.transpose();
    for j in 0..c.ncols() {
        for i in 0..c.nrows() {
            let v = nx[i] + ny[j] - 2.0 * c[(i, j)];
            c[(i, j)] = v.max(0.0);
        }
    }
    c
}

/// `f_i = −λ log Σ_j b_j exp((g_j − c_ij)/λ)`: makes row sums equal `a`.
pub(crate) fn row_potential(g: &[f64], c: &DMatrix<f64>, log_b: &[f64], lambda: f64) -> Vec<f64> {
    let (n, m) = c.shape();
    let shift: Vec<f64> = (0..m).map(|j| log_b[j] + g[j] / lambda).collect();
    let slice = c.as_slice();
    let mut f = vec![0.0; n];
    f.par_chunks_mut(ROW_BLOCK)
        .enumerate()
        .for_each(|(blk, out)| {
            let r0 = blk * ROW_BLOCK;
            let len = out.len();
            let mut mx = vec![f64::NEG_INFINITY; len];
            for (j, s) in shift.iter().enumerate() {
                let col = &slice[j * n + r0..j * n + r0 + len];
                for (k, cij) in col.iter().enumerate() {
                    let v = s - cij / lambda;
                    if v > mx[k] {
                        mx[k] = v;
                    }
                }
            }
            let mut acc = vec![0.0; len];
            for (j, s) in shift.iter().enumerate() {
                let col = &slice[j * n + r0..j * n + r0 + len];
                for (k, cij) in col.iter().enumerate() {
                    acc[k] += (s - cij / lambda - mx[k]).exp();
                }
            }
            for k in 0..len {
                out[k] = -lambda * (mx[k] + acc[k].ln());
            }
        });
    f
}

/// `g_j = −λ log Σ_i a_i exp((f_i − c_ij)/λ)`: makes column sums equal `b`.
pub(crate) fn col_potential(f: &[f64], c: &DMatrix<f64>, log_a: &[f64], lambda: f64) -> Vec<f64> {
    let n = c.nrows();
    let shift: Vec<f64> = (0..n).map(|i| log_a[i] + f[i] / lambda).collect();
    c.as_slice()
        .par_chunks(n)
        .map(|col| {
            let mx = col
                .iter()
                .zip(&shift)
                .map(|(cij, s)| s - cij / lambda)
                .fold(f64::NEG_INFINITY, f64::max);
            let acc: f64 = col
                .iter()
                .zip(&shift)
                .map(|(cij, s)| (s - cij / lambda - mx).exp())
                .sum();
            -lambda * (mx + acc.ln())
        })
        .collect()
}

/// Which potential a Sinkhorn alternation updates first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkhornOrder {
    /// `f` (row constraint) then `g`.
    #[default]
    RowsFirst,
    /// `g` then `f`.
    ColumnsFirst,
}

/// A fuzzy correspondence: dual potentials plus the cost they were solved on.
#[derive(Debug, Clone)]
pub struct SoftCorrespondence {
    f: DVector<f64>,
    g: DVector<f64>,
    lambda: f64,
    cost: Arc<CostMatrix>,
    marginals: Arc<MarginalWeights>,
}

impl SoftCorrespondence {
    pub fn from_potentials(
        f: DVector<f64>,
        g: DVector<f64>,
        lambda: f64,
        cost: Arc<CostMatrix>,
        marginals: Arc<MarginalWeights>,
    ) -> Result<Self> {
        let (n, m) = cost.shape();
        if f.len() != n || g.len() != m || marginals.a.len() != n || marginals.b.len() != m {
            return Err(Error::Dimension("potentials, cost and marginals disagree".into()));
        }
        Ok(SoftCorrespondence {
            f,
            g,
            lambda,
            cost,
            marginals,
        })
    }

    pub fn f(&self) -> &DVector<f64> {
        &self.f
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn cost(&self) -> &Arc<CostMatrix> {
        &self.cost
    }

    pub fn marginals(&self) -> &Arc<MarginalWeights> {
        &self.marginals
    }

    pub fn shape(&self) -> (usize, usize) {
        self.cost.shape()
    }

    /// Natural log of `π_ij`.
    #[inline]
    pub fn log_coupling(&self, i: usize, j: usize) -> f64 {
        self.marginals.log_a[i]
            + self.marginals.log_b[j]
            + (self.f[i] + self.g[j] - self.cost.c[(i, j)]) / self.lambda
    }

    #[inline]
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.log_coupling(i, j).exp()
    }

    /// Materializes rows `r0..r0+len` of π.
    fn block(&self, r0: usize, len: usize) -> DMatrix<f64> {
        let m = self.cost.c.ncols();
        DMatrix::from_fn(len, m, |k, j| self.coupling(r0 + k, j))
    }

    /// Dense π; intended for tests and small exports.
    pub fn dense(&self) -> DMatrix<f64> {
        let (n, _) = self.shape();
        self.block(0, n)
    }

    pub fn row_sums(&self) -> DVector<f64> {
        let (n, m) = self.shape();
        DVector::from_iterator(
            n,
            (0..n)
                .into_par_iter()
                .map(|i| (0..m).map(|j| self.coupling(i, j)).sum::<f64>())
                .collect::<Vec<_>>(),
        )
    }

    pub fn col_sums(&self) -> DVector<f64> {
        let (n, m) = self.shape();
        DVector::from_iterator(
            m,
            (0..m)
                .into_par_iter()
                .map(|j| (0..n).map(|i| self.coupling(i, j)).sum::<f64>())
                .collect::<Vec<_>>(),
        )
    }

    /// Largest absolute deviation of row and column sums from `a` and `b`.
    pub fn marginal_residual(&self) -> f64 {
        let r = (self.row_sums() - &self.marginals.a).abs().max();
        let c = (self.col_sums() - &self.marginals.b).abs().max();
        r.max(c)
    }

    /// `Σ_j π_ij s_j` for every i (no row normalization).
    pub fn pushforward(&self, signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = self.shape();
        if signal.nrows() != m {
            return Err(Error::Dimension(format!(
                "signal has {} rows, coupling has {m} columns",
                signal.nrows()
            )));
        }
        let blocks: Vec<DMatrix<f64>> = (0..n.div_ceil(ROW_BLOCK))
            .into_par_iter()
            .map(|b| {
                let r0 = b * ROW_BLOCK;
                let len = ROW_BLOCK.min(n - r0);
                self.block(r0, len) * signal
            })
            .collect();
        let mut out = DMatrix::zeros(n, signal.ncols());
        for (b, blk) in blocks.iter().enumerate() {
            out.rows_mut(b * ROW_BLOCK, blk.nrows()).copy_from(blk);
        }
        Ok(out)
    }
}

/// Runs exactly `iters` log-domain Sinkhorn alternations from `f = g = 0`.
pub fn sinkhorn(
    cost: Arc<CostMatrix>,
    marginals: Arc<MarginalWeights>,
    lambda: f64,
    iters: usize,
) -> Result<SoftCorrespondence> {
    sinkhorn_ordered(cost, marginals, lambda, iters, SinkhornOrder::RowsFirst)
}

pub fn sinkhorn_ordered(
    cost: Arc<CostMatrix>,
    marginals: Arc<MarginalWeights>,
    lambda: f64,
    iters: usize,
    order: SinkhornOrder,
) -> Result<SoftCorrespondence> {
    check_args(&cost, &marginals, lambda)?;
    if iters == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
    }
    let (n, m) = cost.shape();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..iters {
        alternate(&mut f, &mut g, &cost, &marginals, lambda, order);
    }
    finish(f, g, lambda, cost, marginals)
}

/// Alternates until the marginal residual is ≤ `tol` or `max_iters` is hit.
/// Returns the correspondence and the number of alternations performed.
pub fn sinkhorn_converged(
    cost: Arc<CostMatrix>,
    marginals: Arc<MarginalWeights>,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(SoftCorrespondence, usize)> {
    check_args(&cost, &marginals, lambda)?;
    let (n, m) = cost.shape();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut done = 0;
    while done < max_iters.max(1) {
        alternate(&mut f, &mut g, &cost, &marginals, lambda, SinkhornOrder::RowsFirst);
        done += 1;
        // after the g update the columns are exact up to rounding; check rows
        let f_next = row_potential(&g, &cost.c, marginals.log_b.as_slice(), lambda);
        let row_res = f
            .iter()
            .zip(&f_next)
            .zip(marginals.a.iter())
            .map(|((fo, fn_), a)| (a * (((fo - fn_) / lambda).exp() - 1.0)).abs())
            .fold(0.0, f64::max);
        if row_res <= tol {
            break;
        }
    }
    Ok((finish(f, g, lambda, cost, marginals)?, done))
}

/// Defaults for the converged mode.
pub const CONVERGED_TOL: f64 = 1e-6;
pub const CONVERGED_MAX_ITERS: usize = 500;

fn check_args(cost: &CostMatrix, marginals: &MarginalWeights, lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let (n, m) = cost.shape();
    if marginals.a.len() != n || marginals.b.len() != m {
        return Err(Error::Dimension(format!(
            "cost is {n}×{m}, marginals are {}/{}",
            marginals.a.len(),
            marginals.b.len()
        )));
    }
    if cost.c.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cost matrix entry".into()));
    }
    Ok(())
}

fn alternate(
    f: &mut Vec<f64>,
    g: &mut Vec<f64>,
    cost: &CostMatrix,
    marginals: &MarginalWeights,
    lambda: f64,
    order: SinkhornOrder,
) {
    match order {
        SinkhornOrder::RowsFirst => {
            *f = row_potential(g, &cost.c, marginals.log_b.as_slice(), lambda);
            *g = col_potential(f, &cost.c, marginals.log_a.as_slice(), lambda);
        }
        SinkhornOrder::ColumnsFirst => {
            *g = col_potential(f, &cost.c, marginals.log_a.as_slice(), lambda);
            *f = row_potential(g, &cost.c, marginals.log_b.as_slice(), lambda);
        }
    }
}

fn finish(
    f: Vec<f64>,
    g: Vec<f64>,
    lambda: f64,
    cost: Arc<CostMatrix>,
    marginals: Arc<MarginalWeights>,
) -> Result<SoftCorrespondence> {
    if f.iter().chain(&g).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Sinkhorn potential".into()));
    }
    SoftCorrespondence::from_potentials(
        DVector::from_vec(f),
        DVector::from_vec(g),
        lambda,
        cost,
        marginals,
    )
}

/// Barycentric transfer: row i is `Σ_j π_ij s_j / Σ_j π_ij`.
pub fn coupling_apply(corr: &SoftCorrespondence, signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut z = corr.pushforward(signal)?;
    let mass = corr.row_sums();
    for (i, (mut row, w)) in z.row_iter_mut().zip(mass.iter()).enumerate() {
        if !(*w > 0.0) {
            return Err(Error::NonFinite(format!(
                "row {i} of the coupling has no mass (unconverged Sinkhorn?)"
            )));
        }
        row /= *w;
    }
    Ok(z)
}

/// Transport energy split into its parts; `total = data + entropy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    /// `Σ π_ij c_ij`.
    pub data: f64,
    /// `−λ H(π)`.
    pub entropy: f64,
    pub total: f64,
}

/// `Σ π c − λ H(π)` with `H(π) = −Σ π_ij (log(π_ij / (a_i b_j)) − 1)`.
pub fn transport_energy(corr: &SoftCorrespondence) -> EnergyTerms {
    energy_terms(
        corr.f.as_slice(),
        corr.g.as_slice(),
        &corr.cost.c,
        &corr.marginals,
        corr.lambda,
    )
}

pub(crate) fn energy_terms(
    f: &[f64],
    g: &[f64],
    c: &DMatrix<f64>,
    marginals: &MarginalWeights,
    lambda: f64,
) -> EnergyTerms {
    let (n, m) = c.shape();
    let (data, neg_lambda_h) = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut d = 0.0;
            let mut e = 0.0;
            for i in 0..n {
                let s = (f[i] + g[j] - c[(i, j)]) / lambda;
                let p = (marginals.log_a[i] + marginals.log_b[j] + s).exp();
                d += p * c[(i, j)];
                e += p * lambda * (s - 1.0);
            }
            (d, e)
        })
        .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
    EnergyTerms {
        data,
        entropy: neg_lambda_h,
        total: data + neg_lambda_h,
    }
}

/// A point-to-point map from the vertices of X into Y.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardCorrespondence(pub Vec<usize>);

impl HardCorrespondence {
    pub fn identity(n: usize) -> Self {
        HardCorrespondence((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// `argmax_j π_ij` per row, smallest index on ties.
pub fn extract_map(corr: &SoftCorrespondence) -> HardCorrespondence {
    let (n, m) = corr.shape();
    HardCorrespondence(
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for j in 0..m {
                    let v = corr.log_coupling(i, j);
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                best
            })
            .collect(),
    )
}

const DSPI_MAGIC: &[u8; 4] = b"DSPI";

/// Writes π densely as `DSPI`: magic, n_X u64, n_Y u64, f32 row-major.
/// Refuses couplings with more than `max_entries` entries.
pub fn export_coupling(corr: &SoftCorrespondence, path: impl AsRef<Path>, max_entries: usize) -> Result<()> {
    let (n, m) = corr.shape();
    if n.saturating_mul(m) > max_entries {
        return Err(Error::InvalidArgument(format!(
            "coupling has {} entries, export limit is {max_entries}",
            n * m
        )));
    }
    let mut w = Writer::default();
    w.bytes(DSPI_MAGIC);
    w.u64(n as u64);
    w.u64(m as u64);
    for i in 0..n {
        for j in 0..m {
            w.f32(corr.coupling(i, j) as f32);
        }
    }
    w.save(path)
}

/// Reads a `DSPI` export back into an n_X × n_Y matrix.
pub fn read_coupling(path: impl AsRef<Path>) -> Result<DMatrix<f32>> {
    let mut r = Reader::open(path)?;
    r.magic(DSPI_MAGIC)?;
    let n = r.u64()? as usize;
    let m = r.u64()? as usize;
    let bytes = n
        .checked_mul(m)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format("DSPI dimensions overflow".into()))?;
    r.expect_remaining(bytes)?;
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = r.f32()?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_problem(n: usize, m: usize, seed: u64) -> (Arc<CostMatrix>, Arc<MarginalWeights>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..1.0));
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        (
            Arc::new(CostMatrix::new(c).unwrap()),
            Arc::new(MarginalWeights::new(&a, &b).unwrap()),
        )
    }

    /// Plain-probability Sinkhorn by matrix scaling; independent of the
    /// log-domain kernels.
    fn scaling_oracle(c: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, lambda: f64, iters: usize) -> DMatrix<f64> {
        let k = c.map(|x| (-x / lambda).exp());
        let mut u = DVector::from_element(a.len(), 1.0);
        let mut v = DVector::from_element(b.len(), 1.0);
        for _ in 0..iters {
            let kv = &k * v.component_mul(b);
            u = DVector::from_iterator(a.len(), kv.iter().map(|x| 1.0 / x));
            let ku = k.transpose() * u.component_mul(a);
            v = DVector::from_iterator(b.len(), ku.iter().map(|x| 1.0 / x));
        }
        DMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j] * u[i] * v[j] * k[(i, j)])
    }

    #[test]
    fn cost_of_unit_vectors() {
        let e = DMatrix::<f64>::identity(2, 2);
        let c = embedding_cost(&e, &e).unwrap();
        assert_eq!(c.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]));
        let ey = random(4, 3, 1);
        let ex = ey.rows(2, 1).into_owned();
        assert_eq!(embedding_cost(&ex, &ey).unwrap().matrix()[(0, 2)], 0.0);
        assert!(embedding_cost(&DMatrix::zeros(2, 0), &DMatrix::zeros(3, 0)).is_err());
        assert!(embedding_cost(&DMatrix::zeros(2, 1), &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn cost_matches_triple_loop() {
        let ex = random(5, 3, 2);
        let ey = random(7, 3, 3);
        let c = embedding_cost(&ex, &ey).unwrap();
        let ct = embedding_cost(&ey, &ex).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let mut s = 0.0;
                for d in 0..3 {
                    s += (ex[(i, d)] - ey[(j, d)]).powi(2);
                }
                assert!((c.matrix()[(i, j)] - s).abs() < 1e-12);
                assert_eq!(c.matrix()[(i, j)], ct.matrix()[(j, i)]);
            }
        }
    }

    #[test]
    fn zero_cost_gives_product_coupling() {
        let c = Arc::new(CostMatrix::new(DMatrix::zeros(2, 2)).unwrap());
        let mw = Arc::new(MarginalWeights::uniform(2, 2).unwrap());
        for iters in [1, 3, 10] {
            let s = sinkhorn(c.clone(), mw.clone(), 0.12, iters).unwrap();
            assert!((s.dense() - DMatrix::from_element(2, 2, 0.25)).abs().max() < 1e-15);
        }
        let s = sinkhorn(c, mw, 0.3, 1).unwrap();
        let e = transport_energy(&s);
        assert!(e.data.abs() < 1e-15);
        assert!((e.total + 0.3).abs() < 1e-14);
    }

    #[test]
    fn two_point_permutation() {
        let c = Arc::new(CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap());
        let mw = Arc::new(MarginalWeights::uniform(2, 2).unwrap());
        let s = sinkhorn(c.clone(), mw.clone(), 0.01, 200).unwrap();
        let p = s.dense();
        assert!(p[(0, 1)] < 1e-8 && p[(1, 0)] < 1e-8);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-8 && (p[(1, 1)] - 0.5).abs() < 1e-8);
        assert!(transport_energy(&s).data < 1e-8);
        assert_eq!(extract_map(&s), HardCorrespondence(vec![0, 1]));
        let oracle = scaling_oracle(c.matrix(), mw.a(), mw.b(), 0.01, 200);
        assert!((oracle - p).abs().max() < 1e-12);
    }

    #[test]
    fn matches_scaling_oracle() {
        for seed in 0..5 {
            let (c, mw) = random_problem(9, 6, seed);
            for iters in [1, 4, 25] {
                let s = sinkhorn(c.clone(), mw.clone(), 0.3, iters).unwrap();
                let o = scaling_oracle(c.matrix(), mw.a(), mw.b(), 0.3, iters);
                assert!((s.dense() - o).abs().max() < 1e-13);
            }
        }
    }

    #[test]
    fn converged_mode_meets_tolerance() {
        let (c, mw) = random_problem(40, 55, 7);
        let (s, iters) = sinkhorn_converged(c.clone(), mw.clone(), 0.12, 1e-6, 500).unwrap();
        assert!(iters < 500);
        assert!(s.marginal_residual() <= 1e-6);
        let s = sinkhorn(c, mw, 0.12, 200).unwrap();
        assert!(s.marginal_residual() <= 1e-6);
        let p = s.dense();
        assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn rejects_bad_arguments() {
        let (c, mw) = random_problem(3, 3, 1);
        assert!(sinkhorn(c.clone(), mw.clone(), 0.0, 10).is_err());
        assert!(sinkhorn(c.clone(), mw.clone(), 0.1, 0).is_err());
        let mut bad = c.matrix().clone();
        bad[(1, 1)] = f64::NAN;
        assert!(CostMatrix::new(bad).is_err());
        let wrong = Arc::new(MarginalWeights::uniform(3, 4).unwrap());
        assert!(sinkhorn(c, wrong, 0.1, 3).is_err());
        assert!(MarginalWeights::new(&[1.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn stress_large_costs_small_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = DMatrix::from_fn(30, 20, |_, _| rng.random_range(0.0..1e6));
        let c = Arc::new(CostMatrix::new(c).unwrap());
        let mw = Arc::new(MarginalWeights::uniform(30, 20).unwrap());
        let s = sinkhorn(c, mw, 1e-3, 50).unwrap();
        assert!(s.f().iter().chain(s.g().iter()).all(|x| x.is_finite()));
        assert!(transport_energy(&s).total.is_finite());
    }

    #[test]
    fn large_lambda_approaches_product() {
        // balanced ratios π/(a⊗b) lie in [e^{-2R/λ}, e^{2R/λ}], R = range of c
        for (seed, scale) in [(3, 100.0), (4, 100.0), (5, 1e4)] {
            let (c, mw) = random_problem(8, 11, seed);
            let range = c.matrix().max() - c.matrix().min();
            let lambda = scale * c.matrix().max();
            let s = sinkhorn(c, mw.clone(), lambda, 20).unwrap();
            let prod = mw.a() * mw.b().transpose();
            let dev = s.dense().zip_map(&prod, |p, q| (p / q - 1.0).abs()).max();
            assert!(dev <= (2.0 * range / lambda).exp_m1(), "{dev}");
            if scale >= 1e4 {
                assert!(dev <= 1e-3);
            }
        }
    }

    #[test]
    fn swapping_shapes_transposes() {
        let (c, mw) = random_problem(12, 9, 4);
        let s = sinkhorn(c.clone(), mw.clone(), 0.2, 7).unwrap();
        let t = sinkhorn_ordered(
            Arc::new(c.transpose()),
            Arc::new(mw.swapped()),
            0.2,
            7,
            SinkhornOrder::ColumnsFirst,
        )
        .unwrap();
        assert!((s.dense() - t.dense().transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn coupling_apply_cases() {
        // near-permutation
        let c = DMatrix::from_fn(3, 3, |i, j| if j == (i + 1) % 3 { 0.0 } else { 1.0 });
        let c = Arc::new(CostMatrix::new(c).unwrap());
        let mw = Arc::new(MarginalWeights::uniform(3, 3).unwrap());
        let s = sinkhorn(c, mw.clone(), 0.005, 100).unwrap();
        let sig = random(3, 2, 9);
        let out = coupling_apply(&s, &sig).unwrap();
        for i in 0..3 {
            for d in 0..2 {
                assert!((out[(i, d)] - sig[((i + 1) % 3, d)]).abs() < 1e-12);
            }
        }
        // uniform
        let z = Arc::new(CostMatrix::new(DMatrix::zeros(2, 3)).unwrap());
        let mw = Arc::new(MarginalWeights::new(&[1.0, 2.0], &[1.0, 2.0, 5.0]).unwrap());
        let s = sinkhorn(z, mw.clone(), 0.1, 3).unwrap();
        let sig = random(3, 2, 10);
        let mean = sig.transpose() * mw.b();
        let out = coupling_apply(&s, &sig).unwrap();
        for i in 0..2 {
            for d in 0..2 {
                assert!((out[(i, d)] - mean[d]).abs() < 1e-12);
            }
        }
        assert!(coupling_apply(&s, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn extract_map_ties_prefer_first() {
        let z = Arc::new(CostMatrix::new(DMatrix::zeros(4, 3)).unwrap());
        let mw = Arc::new(MarginalWeights::uniform(4, 3).unwrap());
        let s = sinkhorn(z, mw, 0.1, 2).unwrap();
        assert_eq!(extract_map(&s).0, vec![0, 0, 0, 0]);
    }

    #[test]
    fn energy_against_dense_formula() {
        let (c, mw) = random_problem(6, 8, 12);
        let s = sinkhorn(c.clone(), mw.clone(), 0.25, 5).unwrap();
        let p = s.dense();
        let mut data = 0.0;
        let mut h = 0.0;
        for i in 0..6 {
            for j in 0..8 {
                data += p[(i, j)] * c.matrix()[(i, j)];
                h -= p[(i, j)] * ((p[(i, j)] / (mw.a()[i] * mw.b()[j])).ln() - 1.0);
            }
        }
        let e = transport_energy(&s);
        assert!((e.data - data).abs() < 1e-13);
        assert!((e.total - (data - 0.25 * h)).abs() < 1e-13);
    }

    #[test]
    fn dspi_round_trip() {
        let (c, mw) = random_problem(4, 5, 2);
        let s = sinkhorn(c, mw, 0.5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pi.dspi");
        assert!(export_coupling(&s, &p, 10).is_err());
        export_coupling(&s, &p, 1000).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DSPI");
        assert_eq!(bytes.len(), 4 + 16 + 4 * 20);
        let back = read_coupling(&p).unwrap();
        // row-major: entry (0, 1) is the second float
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), back[(0, 1)]);
        assert!((back.map(|x| x as f64) - s.dense()).abs().max() < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn cost_shift_invariance(seed in 0u64..10_000, shift in -5.0f64..5.0, iters in 1usize..15) {
            let (c, mw) = random_problem(7, 5, seed);
            let shifted = Arc::new(CostMatrix::new(c.matrix().add_scalar(shift + 6.0)).unwrap());
            let p = sinkhorn(c, mw.clone(), 0.12, iters).unwrap().dense();
            let q = sinkhorn(shifted, mw, 0.12, iters).unwrap().dense();
            prop_assert!((p - q).abs().max() <= 1e-10);
        }

        #[test]
        fn coupling_entries_in_unit_interval(seed in 0u64..10_000, lambda in 0.01f64..2.0) {
            let (c, mw) = random_problem(6, 9, seed);
            let s = sinkhorn(c, mw, lambda, 3).unwrap();
            prop_assert!(s.dense().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
