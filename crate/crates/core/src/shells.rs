//! Coarse-to-fine matching over smooth shells.
//!
//! Learned features seed a soft correspondence. Then, for each detail
//! level `k` of a schedule, the deformation `(C, τ)` of X is fitted to the
//! current coupling by least squares, X is re-embedded as
//! `X*_k = (Φ_k C, X_k + Φ_k τ, n*)`, and the coupling is re-projected
//! against the embedding of Y. Every step runs on a [`Tape`] so the same
//! code serves inference and training.

use crate::error::{Error, Result};
use crate::filters::{record_filters, FilterBank};
use crate::grad::{Tape, Var};
use crate::mesh::{canonical_form, normalize_mesh_to, vertex_normals_matrix, TriMesh, TARGET_SQRT_AREA};
use crate::shot::{compute_shot, FeatureMap, ShotConfig};
use crate::spectral::{build_laplacian, eigendecompose, low_pass, smooth_embed, ProductEmbedding, SpectralBasis};
use crate::transport::{
    embedding_cost, sinkhorn, CostMatrix, EnergyTerms, HardCorrespondence, MarginalWeights, SoftCorrespondence,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

pub const DEFAULT_LAMBDA: f64 = 0.12;
pub const DEFAULT_SINKHORN_ITERS: usize = 10;
pub const DEFAULT_EIGENPAIRS: usize = 500;
pub const TEST_LEVEL_CAP: usize = 500;
pub const TEST_EXTRA_LEVELS: usize = 12;

/// Functional map `C` (k×k) and translation coefficients `τ` (k×3).
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationParams {
    pub c: DMatrix<f64>,
    pub tau: DMatrix<f64>,
}

impl DeformationParams {
    pub fn identity(k: usize) -> Self {
        DeformationParams {
            c: DMatrix::identity(k, k),
            tau: DMatrix::zeros(k, 3),
        }
    }

    pub fn k(&self) -> usize {
        self.c.nrows()
    }

    /// Zero-padded to level `k ≥ self.k()`.
    pub fn padded(&self, k: usize) -> Self {
        let k0 = self.k().min(k);
        let mut c = DMatrix::zeros(k, k);
        c.view_mut((0, 0), (k0, k0)).copy_from(&self.c.view((0, 0), (k0, k0)));
        let mut tau = DMatrix::zeros(k, 3);
        tau.rows_mut(0, k0).copy_from(&self.tau.rows(0, k0));
        DeformationParams { c, tau }
    }
}

/// Strictly ascending detail levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    levels: Vec<usize>,
}

impl Schedule {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("schedule is empty".into()));
        }
        if levels[0] < 2 {
            return Err(Error::InvalidArgument("schedule must start at k ≥ 2".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "schedule {levels:?} is not strictly ascending"
            )));
        }
        Ok(Schedule { levels })
    }

    /// `count` log-spaced levels from `start` to `end`, rounded and deduplicated.
    pub fn log_spaced(start: usize, end: usize, count: usize) -> Result<Self> {
        Schedule::new(log_levels(start, end, count))
    }

    /// Eight levels from 6 to 20.
    pub fn training() -> Self {
        Schedule::log_spaced(6, 20, 8).expect("static schedule")
    }

    /// The training levels followed by up to twelve log-spaced levels from
    /// 20 to `min(500, basis_size)`.
    pub fn testing(basis_size: usize) -> Result<Self> {
        Schedule::training().extended(TEST_LEVEL_CAP.min(basis_size))
    }

    /// Appends up to twelve log-spaced levels from the last level to `end`.
    pub fn extended(&self, end: usize) -> Result<Self> {
        let mut levels = self.levels.clone();
        let start = self.max_level();
        if end > start {
            for k in log_levels(start, end, TEST_EXTRA_LEVELS + 1).into_iter().skip(1) {
                if k > *levels.last().unwrap() {
                    levels.push(k);
                }
            }
        }
        Schedule::new(levels)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn max_level(&self) -> usize {
        *self.levels.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

fn log_levels(start: usize, end: usize, count: usize) -> Vec<usize> {
    if count <= 1 || start == end {
        return vec![start];
    }
    let (a, b) = ((start as f64).ln(), (end as f64).ln());
    let mut out: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellConfig {
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    /// Weights of the spectral, coordinate and normal blocks in the cost.
    pub block_weights: [f64; 3],
    /// Multiplies every cost matrix before Sinkhorn.
    pub cost_scale: f64,
    /// Treat `(C, τ)` as constants in the backward pass.
    pub detach_deformation: bool,
    /// Ablation: keep `C = I`, `τ = 0` and seed from the raw embedding.
    pub fixed_deformation: bool,
}

impl Default for ShellConfig {
    fn default() -> Self {
        ShellConfig {
            lambda: DEFAULT_LAMBDA,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            block_weights: [1.0, 1.0, 1.0],
            cost_scale: 1.0,
            detach_deformation: false,
            fixed_deformation: false,
        }
    }
}

impl ShellConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.sinkhorn_iters == 0 || !(self.cost_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "lambda, sinkhorn_iters and cost_scale must be positive".into(),
            ));
        }
        if self.block_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("block weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Preprocessing parameters of [`PreparedShape::prepare_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub eigenpairs: usize,
    pub shot: ShotConfig,
    pub sqrt_area: f64,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            eigenpairs: DEFAULT_EIGENPAIRS,
            shot: ShotConfig::default(),
            sqrt_area: TARGET_SQRT_AREA,
        }
    }
}

/// Everything the pipeline needs about one normalized shape.
#[derive(Debug, Clone)]
pub struct PreparedShape {
    pub mesh: TriMesh,
    pub basis: SpectralBasis,
    pub mass: DVector<f64>,
    pub features: FeatureMap,
}

impl PreparedShape {
    /// `mesh` must already be normalized.
    pub fn new(mesh: TriMesh, basis: SpectralBasis, features: FeatureMap) -> Result<Self> {
        let n = mesh.num_vertices();
        if basis.num_vertices() != n || features.num_vertices() != n {
            return Err(Error::Dimension(
                "mesh, basis and features disagree on vertex count".into(),
            ));
        }
        let mass = DVector::from_column_slice(mesh.vertex_areas());
        Ok(PreparedShape {
            mesh,
            basis,
            mass,
            features,
        })
    }

    /// Normalizes `mesh`, then computes `eigenpairs` eigenpairs (capped at the
    /// vertex count) and SHOT descriptors.
    ///
    /// All of it runs on the [`canonical_form`] of the mesh and is mapped
    /// back, so relabeled copies get exactly relabeled results even inside
    /// degenerate eigenspaces.
    pub fn prepare(mesh: &TriMesh, eigenpairs: usize, shot: &ShotConfig) -> Result<Self> {
        PreparedShape::prepare_with(
            mesh,
            &Preprocess {
                eigenpairs,
                shot: *shot,
                sqrt_area: TARGET_SQRT_AREA,
            },
        )
    }

    pub fn prepare_with(mesh: &TriMesh, pre: &Preprocess) -> Result<Self> {
        let (normalized, perm) = canonical_normalized(mesh, pre.sqrt_area)?;
        let lap = build_laplacian(&normalized);
        let basis = eigendecompose(&lap, pre.eigenpairs.min(normalized.num_vertices()))?;
        let features = compute_shot(&normalized, &pre.shot)?;
        let mesh = mesh.with_vertices(perm.iter().map(|&c| normalized.vertices()[c]).collect())?;
        let basis = SpectralBasis::new(basis.eigenvalues().clone(), gather_rows(basis.eigenvectors(), &perm))?;
        let features = FeatureMap::new(gather_rows(features.values(), &perm), features.label())?;
        PreparedShape::new(mesh, basis, features)
    }

    /// Reassembles a shape from a stored basis and features, normalizing
    /// `mesh` exactly as [`PreparedShape::prepare_with`] does.
    pub fn from_parts(mesh: &TriMesh, sqrt_area: f64, basis: SpectralBasis, features: FeatureMap) -> Result<Self> {
        let (normalized, perm) = canonical_normalized(mesh, sqrt_area)?;
        let mesh = mesh.with_vertices(perm.iter().map(|&c| normalized.vertices()[c]).collect())?;
        PreparedShape::new(mesh, basis, features)
    }

    pub fn num_vertices(&self) -> usize {
        self.mesh.num_vertices()
    }
}

/// Normalized canonical form of `mesh` and `perm[old] = new`.
fn canonical_normalized(mesh: &TriMesh, sqrt_area: f64) -> Result<(TriMesh, Vec<usize>)> {
    let (canonical, perm) = canonical_form(mesh);
    Ok((normalize_mesh_to(&canonical, sqrt_area)?.mesh, perm))
}

/// Row `i` of the result is row `perm[i]` of `m`.
fn gather_rows(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), m.ncols(), |i, j| m[(perm[i], j)])
}

/// Diagnostics of one schedule level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelRecord {
    pub k: usize,
    pub energy: EnergyTerms,
    /// Least-squares objective of the deformation fit before and after the
    /// solve, with the coupling held fixed.
    pub objective_before: f64,
    pub objective_after: f64,
}

#[derive(Debug, Clone)]
pub struct ShellState {
    pub k: usize,
    pub deform: DeformationParams,
    pub corr: SoftCorrespondence,
    pub init_energy: EnergyTerms,
    pub energy_trace: Vec<LevelRecord>,
}

/// Sinkhorn on the feature cost: the only entry point of learned features.
pub fn init_correspondence(
    gx: &FeatureMap,
    gy: &FeatureMap,
    marginals: Arc<MarginalWeights>,
    lambda: f64,
    iters: usize,
) -> Result<SoftCorrespondence> {
    if gx.channels() != gy.channels() {
        return Err(Error::Dimension(format!(
            "feature widths differ: {} vs {}",
            gx.channels(),
            gy.channels()
        )));
    }
    let cost = embedding_cost(gx.values(), gy.values())?;
    sinkhorn(Arc::new(cost), marginals, lambda, iters)
}

/// Unnormalized Y-side signal `[1 | Φ^Y_k | Y_k]` pushed through π.
fn y_signal(embedding_y: &ProductEmbedding) -> DMatrix<f64> {
    let n = embedding_y.matrix().nrows();
    let k = embedding_y.k();
    let mut s = DMatrix::zeros(n, 1 + k + 3);
    s.column_mut(0).fill(1.0);
    s.columns_mut(1, k + 3).copy_from(&embedding_y.matrix().columns(0, k + 3));
    s
}

/// Column sums of the coupling implied by `f`, `g`, `c`.
fn column_mass(f: &DMatrix<f64>, g: &DMatrix<f64>, c: &DMatrix<f64>, lambda: f64, mw: &MarginalWeights) -> Vec<f64> {
    let (la, lb) = (mw.log_a(), mw.log_b());
    (0..c.ncols())
        .into_par_iter()
        .map(|j| {
            (0..c.nrows())
                .map(|i| (la[i] + lb[j] + (f[(i, 0)] + g[(j, 0)] - c[(i, j)]) / lambda).exp())
                .sum()
        })
        .collect()
}

/// Inputs of the least-squares fit at one level, all as plain values.
struct FitData<'a> {
    phi_x: &'a DMatrix<f64>,
    x_k: &'a DMatrix<f64>,
    y_signal: &'a DMatrix<f64>,
    row_mass: DVector<f64>,
    col_mass: Vec<f64>,
    pushed: DMatrix<f64>,
}

impl FitData<'_> {
    /// `Σ_ij π_ij (‖Φ_X(i) C − Φ_Y(j)‖² + ‖X_k(i) + Φ_X(i) τ − Y_k(j)‖²)`.
    fn objective(&self, d: &DeformationParams) -> f64 {
        let k = d.k();
        let u = self.phi_x * &d.c;
        let x = self.x_k + self.phi_x * &d.tau;
        let mut total = 0.0;
        for i in 0..u.nrows() {
            let z = self.pushed.row(i);
            let di = self.row_mass[i];
            total += di * (u.row(i).norm_squared() + x.row(i).norm_squared());
            total -= 2.0 * (u.row(i).dot(&z.columns(1, k)) + x.row(i).dot(&z.columns(1 + k, 3)));
        }
        for (j, bj) in self.col_mass.iter().enumerate() {
            total += bj * self.y_signal.row(j).columns(1, k + 3).norm_squared();
        }
        total
    }
}

/// Records the normal-equation solve for `(C, τ)` and returns `S = [C | τ]`.
#[allow(clippy::too_many_arguments)]
fn record_deformation_solve(
    tape: &mut Tape,
    f: Var,
    g: Var,
    c: Var,
    phi: Var,
    x_k: Var,
    y_signal: Arc<DMatrix<f64>>,
    k: usize,
    lambda: f64,
    marginals: &Arc<MarginalWeights>,
) -> Result<(Var, Var)> {
    let z = tape.pushforward(f, g, c, y_signal, lambda, marginals);
    let d = tape.columns(z, 0, 1);
    let z_phi = tape.columns(z, 1, k);
    let z_y = tape.columns(z, 1 + k, 3);
    let d_phi = tape.scale_rows(phi, d);
    let normal = tape.tr_matmul(phi, d_phi);
    let d_x = tape.scale_rows(x_k, d);
    let z_x = tape.sub(z_y, d_x);
    let rhs_blocks = tape.hcat(&[z_phi, z_x]);
    let rhs = tape.tr_matmul(phi, rhs_blocks);
    let solution = tape.solve(normal, rhs).map_err(|e| match e {
        Error::Singular { rcond, .. } => Error::Singular { k, rcond },
        other => other,
    })?;
    Ok((solution, z))
}

/// Least-squares `(C, τ)` for a fixed coupling at level `k`.
pub fn solve_deformation(
    basis_x: &SpectralBasis,
    mesh_x: &TriMesh,
    embedding_y: &ProductEmbedding,
    corr: &SoftCorrespondence,
    k: usize,
) -> Result<DeformationParams> {
    let (nx, ny) = corr.shape();
    if k > basis_x.len() || embedding_y.k() != k {
        return Err(Error::Dimension(format!(
            "level {k} exceeds the X basis ({}) or mismatches the Y embedding ({})",
            basis_x.len(),
            embedding_y.k()
        )));
    }
    if nx != mesh_x.num_vertices() || ny != embedding_y.matrix().nrows() {
        return Err(Error::Dimension("correspondence does not match the shapes".into()));
    }
    let mass = DVector::from_column_slice(mesh_x.vertex_areas());
    let x_k = low_pass(basis_x, &mass, k, &mesh_x.coords_matrix())?;
    let mut tape = Tape::inference();
    let f = tape.constant(DMatrix::from_column_slice(nx, 1, corr.f().as_slice()));
    let g = tape.constant(DMatrix::from_column_slice(ny, 1, corr.g().as_slice()));
    let c = tape.constant(corr.cost().matrix().clone());
    let phi = tape.constant(basis_x.truncated(k));
    let xk = tape.constant(x_k);
    let signal = Arc::new(y_signal(embedding_y));
    let (s, _) = record_deformation_solve(&mut tape, f, g, c, phi, xk, signal, k, corr.lambda(), corr.marginals())?;
    let s = tape.value(s);
    Ok(DeformationParams {
        c: s.columns(0, k).into_owned(),
        tau: s.columns(k, 3).into_owned(),
    })
}

/// `(Φ_k C, X_k + Φ_k τ, n*)` with normals recomputed on the original
/// connectivity.
pub fn deformed_embedding(
    mesh_x: &TriMesh,
    basis_x: &SpectralBasis,
    deform: &DeformationParams,
    k: usize,
) -> Result<ProductEmbedding> {
    if deform.k() != k || deform.tau.shape() != (k, 3) || deform.c.ncols() != k {
        return Err(Error::Dimension(format!("deformation is not at level {k}")));
    }
    let mass = DVector::from_column_slice(mesh_x.vertex_areas());
    let phi = basis_x.truncated(k);
    let x_k = low_pass(basis_x, &mass, k, &mesh_x.coords_matrix())?;
    let coords = x_k + &phi * &deform.tau;
    let normals = vertex_normals_matrix(&coords, mesh_x.triangles());
    ProductEmbedding::from_blocks(&(&phi * &deform.c), &coords, &normals)
}

/// Result of recording the pipeline: the loss node and the final state.
pub(crate) struct PipelineRun {
    pub loss: Var,
    pub state: ShellState,
}

/// Runs initialization plus every level on `tape`, starting from the
/// feature nodes `gx`, `gy`.
pub(crate) fn record_pipeline(
    tape: &mut Tape,
    x: &PreparedShape,
    y: &PreparedShape,
    gx: Var,
    gy: Var,
    schedule: &Schedule,
    cfg: &ShellConfig,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let top = schedule.max_level();
    if top > x.basis.len() || top > y.basis.len() {
        return Err(Error::InvalidArgument(format!(
            "schedule reaches k={top} but the bases hold {} and {} eigenpairs",
            x.basis.len(),
            y.basis.len()
        )));
    }
    if tape.value(gx).ncols() != tape.value(gy).ncols() {
        return Err(Error::Dimension("feature widths differ between the shapes".into()));
    }
    let marginals = Arc::new(MarginalWeights::new(x.mesh.vertex_areas(), y.mesh.vertex_areas())?);
    let lambda = cfg.lambda;
    let (nx, ny) = (x.num_vertices(), y.num_vertices());
    let triangles = Arc::new(x.mesh.triangles().to_vec());
    let sqrt_w = cfg.block_weights.map(f64::sqrt);

    let scaled_cost = |tape: &mut Tape, ex: Var, ey: Var| {
        let c = tape.pairwise_sq_dist(ex, ey);
        if cfg.cost_scale != 1.0 {
            let s = tape.scale(c, cfg.cost_scale);
            tape.release(c);
            s
        } else {
            c
        }
    };
    let project = |tape: &mut Tape, c: Var| {
        let mut g = tape.constant(DMatrix::zeros(ny, 1));
        let mut f = tape.constant(DMatrix::zeros(nx, 1));
        for _ in 0..cfg.sinkhorn_iters {
            let (f_old, g_old) = (f, g);
            f = tape.sinkhorn_row(g, c, lambda, &marginals);
            g = tape.sinkhorn_col(f, c, lambda, &marginals);
            tape.release(f_old);
            tape.release(g_old);
        }
        (f, g)
    };

    let first = schedule.levels()[0];
    let mut cost = if cfg.fixed_deformation {
        let ex = smooth_embed(&x.mesh, &x.basis, first)?.weighted(cfg.block_weights);
        let ey = smooth_embed(&y.mesh, &y.basis, first)?.weighted(cfg.block_weights);
        let (ex, ey) = (tape.constant(ex), tape.constant(ey));
        scaled_cost(tape, ex, ey)
    } else {
        scaled_cost(tape, gx, gy)
    };
    let (mut f, mut g) = project(tape, cost);
    let (_, init_energy) = tape.transport_energy(f, g, cost, lambda, &marginals);

    let mut deform = DeformationParams::identity(first);
    let mut trace = Vec::with_capacity(schedule.len());
    let mut energies = Vec::with_capacity(schedule.len());
    for &k in schedule.levels() {
        let emb_y = smooth_embed(&y.mesh, &y.basis, k)?;
        let phi_val = x.basis.truncated(k);
        let xk_val = low_pass(&x.basis, &x.mass, k, &x.mesh.coords_matrix())?;
        let phi = tape.constant(phi_val.clone());
        let xk = tape.constant(xk_val.clone());
        let (spectral, coords, objective_before, objective_after, next) = if cfg.fixed_deformation {
            let id = DeformationParams::identity(k);
            (phi, xk, 0.0, 0.0, id)
        } else {
            let signal = Arc::new(y_signal(&emb_y));
            let (mut s, z) =
                record_deformation_solve(tape, f, g, cost, phi, xk, signal.clone(), k, lambda, &marginals)?;
            if cfg.detach_deformation {
                s = tape.detach(s);
            }
            let next = DeformationParams {
                c: tape.value(s).columns(0, k).into_owned(),
                tau: tape.value(s).columns(k, 3).into_owned(),
            };
            let fit = FitData {
                phi_x: &phi_val,
                x_k: &xk_val,
                y_signal: &signal,
                row_mass: tape.value(z).column(0).into_owned(),
                col_mass: column_mass(tape.value(f), tape.value(g), tape.value(cost), lambda, &marginals),
                pushed: tape.value(z).clone(),
            };
            let before = fit.objective(&deform.padded(k));
            let after = fit.objective(&next);
            let c_dag = tape.columns(s, 0, k);
            let tau = tape.columns(s, k, 3);
            let spectral = tape.matmul(phi, c_dag);
            let disp = tape.matmul(phi, tau);
            let coords = tape.add(xk, disp);
            (spectral, coords, before, after, next)
        };
        let normals = tape.vertex_normals(coords, &triangles);
        let blocks = [
            tape.scale(spectral, sqrt_w[0]),
            tape.scale(coords, sqrt_w[1]),
            tape.scale(normals, sqrt_w[2]),
        ];
        let ex = tape.hcat(&blocks);
        let ey = tape.constant(emb_y.weighted(cfg.block_weights));
        let next_cost = scaled_cost(tape, ex, ey);
        tape.release(cost);
        cost = next_cost;
        (f, g) = project(tape, cost);
        let (energy, terms) = tape.transport_energy(f, g, cost, lambda, &marginals);
        log::debug!(
            "level k={k}: data {:.6} entropy {:.6} total {:.6}",
            terms.data,
            terms.entropy,
            terms.total
        );
        energies.push(energy);
        trace.push(LevelRecord {
            k,
            energy: terms,
            objective_before,
            objective_after,
        });
        deform = next;
    }
    let mut loss = energies[0];
    for e in &energies[1..] {
        loss = tape.add(loss, *e);
    }
    let loss = tape.scale(loss, 1.0 / energies.len() as f64);
    let corr = SoftCorrespondence::from_potentials(
        DVector::from_column_slice(tape.value(f).as_slice()),
        DVector::from_column_slice(tape.value(g).as_slice()),
        lambda,
        Arc::new(CostMatrix::new(tape.value(cost).clone())?),
        marginals,
    )?;
    Ok(PipelineRun {
        loss,
        state: ShellState {
            k: schedule.max_level(),
            deform,
            corr,
            init_energy,
            energy_trace: trace,
        },
    })
}

/// Full matching with learned features: filters, initialization, levels.
pub fn match_pair(
    x: &PreparedShape,
    y: &PreparedShape,
    bank: &FilterBank,
    schedule: &Schedule,
    cfg: &ShellConfig,
) -> Result<(HardCorrespondence, ShellState)> {
    let mut tape = Tape::inference();
    let gamma = tape.constant(bank.weights().clone());
    let gx = record_filters(&mut tape, bank, gamma, &x.basis, &x.mass, &x.features)?;
    let gy = record_filters(&mut tape, bank, gamma, &y.basis, &y.mass, &y.features)?;
    finish_inference(tape, x, y, gx, gy, schedule, cfg)
}

/// Matching from given initialization features, bypassing the filters.
pub fn match_features(
    x: &PreparedShape,
    y: &PreparedShape,
    gx: &FeatureMap,
    gy: &FeatureMap,
    schedule: &Schedule,
    cfg: &ShellConfig,
) -> Result<(HardCorrespondence, ShellState)> {
    if gx.num_vertices() != x.num_vertices() || gy.num_vertices() != y.num_vertices() {
        return Err(Error::Dimension("feature rows do not match the shapes".into()));
    }
    let mut tape = Tape::inference();
    let gx = tape.constant(gx.values().clone());
    let gy = tape.constant(gy.values().clone());
    finish_inference(tape, x, y, gx, gy, schedule, cfg)
}

fn finish_inference(
    mut tape: Tape,
    x: &PreparedShape,
    y: &PreparedShape,
    gx: Var,
    gy: Var,
    schedule: &Schedule,
    cfg: &ShellConfig,
) -> Result<(HardCorrespondence, ShellState)> {
    let run = record_pipeline(&mut tape, x, y, gx, gy, schedule, cfg)?;
    drop(tape);
    let map = crate::transport::extract_map(&run.state.corr);
    Ok((map, run.state))
}

/// Mean transport energy over the schedule levels.
pub fn matching_loss(state: &ShellState) -> Result<f64> {
    if state.energy_trace.is_empty() {
        return Err(Error::InvalidArgument("energy trace is empty".into()));
    }
    let sum: f64 = state.energy_trace.iter().map(|r| r.energy.total).sum();
    Ok(sum / state.energy_trace.len() as f64)
}

/// Text map: header `# deepshells v1 nX=<n> nY=<m>`, then one Y index per line.
pub fn write_correspondence(map: &HardCorrespondence, ny: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("# deepshells v1 nX={} nY={ny}\n", map.len());
    for j in map.as_slice() {
        writeln!(out, "{j}").unwrap();
    }
    write_text(path, out)
}

/// Parses a correspondence file. Returns the map and the declared `nY`.
pub fn read_correspondence(path: impl AsRef<Path>) -> Result<(HardCorrespondence, usize)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let field = |key: &str| -> Option<usize> {
        fields
            .iter()
            .find_map(|f| f.strip_prefix(key))
            .and_then(|v| v.parse().ok())
    };
    let (Some(nx), Some(ny)) = (field("nX="), field("nY=")) else {
        return Err(parse_err(1, format!("bad header {header:?}")));
    };
    if !header.starts_with("# deepshells v1") {
        return Err(parse_err(1, format!("bad header {header:?}")));
    }
    let mut map = Vec::with_capacity(nx);
    for (i, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let j: usize = t.parse().map_err(|_| parse_err(i + 1, format!("not an index: {t:?}")))?;
        if j >= ny {
            return Err(parse_err(i + 1, format!("index {j} out of range for nY={ny}")));
        }
        map.push(j);
    }
    if map.len() != nx {
        return Err(parse_err(
            text.lines().count(),
            format!("expected {nx} entries, found {}", map.len()),
        ));
    }
    Ok((HardCorrespondence(map), ny))
}

/// CSV `level,k,data_term,entropy_term,total`; level 0 is the feature
/// initialization.
pub fn write_energy_csv(state: &ShellState, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("level,k,data_term,entropy_term,total\n");
    let e = state.init_energy;
    writeln!(out, "0,0,{},{},{}", e.data, e.entropy, e.total).unwrap();
    for (i, r) in state.energy_trace.iter().enumerate() {
        let e = r.energy;
        writeln!(out, "{},{},{},{},{}", i + 1, r.k, e.data, e.entropy, e.total).unwrap();
    }
    write_text(path, out)
}

pub(crate) fn write_text(path: impl AsRef<Path>, text: String) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
