//! Learnable spectral convolution.
//!
//! Each filter is a smooth function of frequency, expanded in a cosine
//! basis over `[0, T]`. For input channel `l` and output channel `l'`
//!
//! ```text
//! G_{l'} = h( Σ_l Φ_k ((B γ_{l',l}) ⊙ Φ_kᵀ M F_l) )
//! ```
//!
//! Weights are stored as an `L_out × (L_in·J)` matrix `Γ` with
//! `Γ[l', l·J + j] = γ_{l',l,j}`. With the spectral products
//! `P[i, l·J + j] = A[i, l]·B[i, j]`, `A = Φ_kᵀ M F`, the forward pass is
//! `h(Φ_k P Γᵀ)`.

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::io::{Reader, Writer};
use crate::shot::FeatureMap;
use crate::spectral::SpectralBasis;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const DEFAULT_OUTPUT_CHANNELS: usize = 120;
pub const DEFAULT_BASIS_FUNCTIONS: usize = 16;
pub const DEFAULT_FREQUENCY_EXTENT: f64 = 2e4;
pub const DEFAULT_K_CONV: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    pub fn apply(self, x: &mut DMatrix<f64>) {
        if self == Activation::Relu {
            x.apply(|v| *v = v.max(0.0));
        }
    }
}

/// `B_ij = cos(λ_i π j / T)` for `j = 0..J`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBasis {
    values: DMatrix<f64>,
}

impl FrequencyBasis {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn num_frequencies(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_functions(&self) -> usize {
        self.values.ncols()
    }
}

pub fn build_frequency_basis(eigenvalues: &[f64], functions: usize, extent: f64) -> Result<FrequencyBasis> {
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "frequency extent must be positive, got {extent}"
        )));
    }
    if functions == 0 {
        return Err(Error::InvalidArgument("need at least one basis function".into()));
    }
    if let Some(&bad) = eigenvalues.iter().find(|l| !(**l >= -1e-9) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!("eigenvalue {bad} is negative")));
    }
    let top = eigenvalues.iter().cloned().fold(0.0, f64::max);
    if top > 1.5 * extent {
        return Err(Error::InvalidArgument(format!(
            "eigenvalue {top} exceeds 1.5·T = {}",
            1.5 * extent
        )));
    }
    if top > extent {
        log::warn!("eigenvalue {top} lies beyond the frequency extent {extent}");
    }
    let values = DMatrix::from_fn(eigenvalues.len(), functions, |i, j| {
        (eigenvalues[i] * std::f64::consts::PI * j as f64 / extent).cos()
    });
    Ok(FrequencyBasis { values })
}

/// Sizes and hyperparameters of a filter bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDims {
    pub input_channels: usize,
    pub output_channels: usize,
    pub basis_functions: usize,
    pub extent: f64,
    pub k_conv: usize,
    pub activation: Activation,
}

impl FilterDims {
    pub fn new(input_channels: usize) -> Self {
        FilterDims {
            input_channels,
            output_channels: DEFAULT_OUTPUT_CHANNELS,
            basis_functions: DEFAULT_BASIS_FUNCTIONS,
            extent: DEFAULT_FREQUENCY_EXTENT,
            k_conv: DEFAULT_K_CONV,
            activation: Activation::Relu,
        }
    }

    /// Half-width of the uniform initialization range.
    pub fn init_bound(&self) -> f64 {
        let j = self.basis_functions as f64;
        (6.0 / (self.input_channels as f64 * j + self.output_channels as f64 * j)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    weights: DMatrix<f64>,
    dims: FilterDims,
}

impl FilterBank {
    /// `weights` is `L_out × (L_in·J)`.
    pub fn new(weights: DMatrix<f64>, dims: FilterDims) -> Result<Self> {
        if dims.basis_functions == 0 || dims.input_channels == 0 || dims.output_channels == 0 {
            return Err(Error::InvalidArgument("filter bank dimensions must be positive".into()));
        }
        if dims.k_conv == 0 {
            return Err(Error::InvalidArgument("k_conv must be positive".into()));
        }
        if !(dims.extent > 0.0) {
            return Err(Error::InvalidArgument("frequency extent must be positive".into()));
        }
        if weights.shape() != (dims.output_channels, dims.input_channels * dims.basis_functions) {
            return Err(Error::Dimension(format!(
                "weights are {:?}, expected {}×{}",
                weights.shape(),
                dims.output_channels,
                dims.input_channels * dims.basis_functions
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("filter weight".into()));
        }
        Ok(FilterBank { weights, dims })
    }

    pub fn zeros(dims: FilterDims) -> Result<Self> {
        let w = DMatrix::zeros(dims.output_channels, dims.input_channels * dims.basis_functions);
        FilterBank::new(w, dims)
    }

    pub fn dims(&self) -> &FilterDims {
        &self.dims
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: DMatrix<f64>) -> Result<()> {
        *self = FilterBank::new(weights, self.dims)?;
        Ok(())
    }

    /// `γ_{l_out, l_in, j}`.
    pub fn weight(&self, l_out: usize, l_in: usize, j: usize) -> f64 {
        self.weights[(l_out, l_in * self.dims.basis_functions + j)]
    }

    pub fn set_weight(&mut self, l_out: usize, l_in: usize, j: usize, value: f64) {
        let jn = self.dims.basis_functions;
        self.weights[(l_out, l_in * jn + j)] = value;
    }

    /// Frequency basis over the first `k_conv` eigenvalues of `basis`.
    pub fn frequency_basis(&self, basis: &SpectralBasis) -> Result<FrequencyBasis> {
        if basis.len() < self.dims.k_conv {
            return Err(Error::Dimension(format!(
                "basis has {} eigenpairs, filters need k_conv = {}",
                basis.len(),
                self.dims.k_conv
            )));
        }
        let lambdas: Vec<f64> = basis.eigenvalues().rows(0, self.dims.k_conv).iter().map(|l| l.max(0.0)).collect();
        build_frequency_basis(&lambdas, self.dims.basis_functions, self.dims.extent)
    }
}

/// Fan-balanced uniform initialization, deterministic in `seed`.
pub fn init_filterbank(seed: u64, dims: FilterDims) -> Result<FilterBank> {
    let a = dims.init_bound();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = dims.input_channels * dims.basis_functions;
    // row-major draw order so the stream matches [l_out][l_in][j]
    let mut w = DMatrix::zeros(dims.output_channels, cols);
    for r in 0..dims.output_channels {
        for c in 0..cols {
            w[(r, c)] = rng.random_range(-a..=a);
        }
    }
    FilterBank::new(w, dims)
}

/// `P[i, l·J + j] = A[i, l]·B[i, j]`.
pub(crate) fn spectral_products(coeffs: &DMatrix<f64>, freq: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, l_in) = coeffs.shape();
    let jn = freq.ncols();
    let mut p = DMatrix::zeros(k, l_in * jn);
    for l in 0..l_in {
        for j in 0..jn {
            let mut col = p.column_mut(l * jn + j);
            for i in 0..k {
                col[i] = coeffs[(i, l)] * freq[(i, j)];
            }
        }
    }
    p
}

/// Row-weighted transpose product `Φ_kᵀ diag(m) F`.
pub(crate) fn analysis(phi: &DMatrix<f64>, mass: &DVector<f64>, signal: &DMatrix<f64>) -> DMatrix<f64> {
    let mut weighted = signal.clone();
    for (mut row, m) in weighted.row_iter_mut().zip(mass.iter()) {
        row *= *m;
    }
    phi.tr_mul(&weighted)
}

fn check_inputs(bank: &FilterBank, basis: &SpectralBasis, mass: &DVector<f64>, features: &FeatureMap) -> Result<()> {
    let f = features.values();
    if f.ncols() != bank.dims.input_channels {
        return Err(Error::Dimension(format!(
            "features have {} channels, filters expect {}",
            f.ncols(),
            bank.dims.input_channels
        )));
    }
    if f.nrows() != basis.num_vertices() || mass.len() != basis.num_vertices() {
        return Err(Error::Dimension("features, mass and basis disagree on vertex count".into()));
    }
    Ok(())
}

/// Constant factors of the forward pass: `Φ_k` and the spectral products `P`.
fn forward_factors(
    bank: &FilterBank,
    basis: &SpectralBasis,
    mass: &DVector<f64>,
    features: &FeatureMap,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_inputs(bank, basis, mass, features)?;
    let freq = bank.frequency_basis(basis)?;
    let phi = basis.truncated(bank.dims.k_conv);
    let coeffs = analysis(&phi, mass, features.values());
    let p = spectral_products(&coeffs, freq.matrix());
    Ok((phi, p))
}

/// Pre-activation filter response `Φ_k P Γᵀ`.
pub fn filter_response(
    bank: &FilterBank,
    basis: &SpectralBasis,
    mass: &DVector<f64>,
    features: &FeatureMap,
) -> Result<DMatrix<f64>> {
    let (phi, p) = forward_factors(bank, basis, mass, features)?;
    Ok(phi * (p * bank.weights.transpose()))
}

/// Records the forward pass on `tape` with `gamma` standing for the weights.
pub fn record_filters(
    tape: &mut Tape,
    bank: &FilterBank,
    gamma: Var,
    basis: &SpectralBasis,
    mass: &DVector<f64>,
    features: &FeatureMap,
) -> Result<Var> {
    let (phi, p) = forward_factors(bank, basis, mass, features)?;
    let p = tape.constant(p);
    let phi = tape.constant(phi);
    let coeffs = tape.matmul_tr(p, gamma);
    let pre = tape.matmul(phi, coeffs);
    Ok(match bank.dims.activation {
        Activation::Relu => tape.relu(pre),
        Activation::Identity => pre,
    })
}

pub fn apply_filters(
    bank: &FilterBank,
    basis: &SpectralBasis,
    mass: &DVector<f64>,
    features: &FeatureMap,
) -> Result<FeatureMap> {
    let mut g = filter_response(bank, basis, mass, features)?;
    bank.dims.activation.apply(&mut g);
    FeatureMap::new(g, "filtered")
}

const DSHL_MAGIC: &[u8; 4] = b"DSHL";
const DSHL_VERSION: u32 = 1;

pub fn write_checkpoint(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    let d = &bank.dims;
    let mut w = Writer::default();
    w.bytes(DSHL_MAGIC);
    w.u32(DSHL_VERSION);
    w.u32(d.output_channels as u32);
    w.u32(d.input_channels as u32);
    w.u32(d.basis_functions as u32);
    w.f64(d.extent);
    w.u8(d.activation.code());
    w.u32(d.k_conv as u32);
    for r in 0..d.output_channels {
        for v in bank.weights.row(r).iter() {
            w.f32(*v as f32);
        }
    }
    w.save(path)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<FilterBank> {
    let mut r = Reader::open(path)?;
    r.magic(DSHL_MAGIC)?;
    let version = r.u32()?;
    if version != DSHL_VERSION {
        return Err(Error::Format(format!("DSHL version {version} unsupported")));
    }
    let output_channels = r.u32()? as usize;
    let input_channels = r.u32()? as usize;
    let basis_functions = r.u32()? as usize;
    let extent = r.f64()?;
    let activation = Activation::from_code(r.u8()?)?;
    let k_conv = r.u32()? as usize;
    let cols = input_channels * basis_functions;
    r.expect_remaining(4 * output_channels * cols)?;
    let mut weights = DMatrix::zeros(output_channels, cols);
    for i in 0..output_channels {
        for j in 0..cols {
            weights[(i, j)] = r.f32()? as f64;
        }
    }
    FilterBank::new(
        weights,
        FilterDims {
            input_channels,
            output_channels,
            basis_functions,
            extent,
            k_conv,
            activation,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_icosphere, normalize_mesh};
    use crate::spectral::{build_laplacian, eigendecompose};

    fn small_dims(l_in: usize, l_out: usize, j: usize, k: usize) -> FilterDims {
        FilterDims {
            input_channels: l_in,
            output_channels: l_out,
            basis_functions: j,
            extent: DEFAULT_FREQUENCY_EXTENT,
            k_conv: k,
            activation: Activation::Identity,
        }
    }

    fn sphere_setup(subdiv: usize, k: usize) -> (SpectralBasis, DVector<f64>) {
        let m = normalize_mesh(&make_icosphere(subdiv, 1.0).unwrap()).unwrap().mesh;
        let lap = build_laplacian(&m);
        let b = eigendecompose(&lap, k).unwrap();
        (b, lap.mass.clone())
    }

    fn random_features(n: usize, l: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(DMatrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0)), "random").unwrap()
    }

    #[test]
    fn frequency_basis_closed_forms() {
        let t = 2e4;
        let b = build_frequency_basis(&[0.0, t / 2.0, t], 2, t).unwrap();
        let want = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 1.0, -1.0]);
        assert!((b.matrix() - want).abs().max() < 1e-15);
        let b = build_frequency_basis(&[0.0, 5.0, 9e3], 1, t).unwrap();
        assert!(b.matrix().iter().all(|x| *x == 1.0));
        let b = build_frequency_basis(&[t / 3.0], 4, t).unwrap();
        assert!((b.matrix()[(0, 3)] + 1.0).abs() < 1e-15);
        assert!(build_frequency_basis(&[1.0], 2, 0.0).is_err());
        assert!(build_frequency_basis(&[1.0], 2, -1.0).is_err());
        assert!(build_frequency_basis(&[2.0 * t], 2, t).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dims = FilterDims::new(352);
        assert!((dims.init_bound() - 0.0282).abs() < 5e-5);
        let a = init_filterbank(3, dims).unwrap();
        let b = init_filterbank(3, dims).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_filterbank(4, dims).unwrap());
        assert!(a.weights().iter().all(|w| w.abs() <= dims.init_bound()));
        assert_eq!(a.weights().shape(), (120, 352 * 16));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (b, m) = sphere_setup(1, 20);
        let mut dims = small_dims(3, 5, 4, 20);
        dims.activation = Activation::Relu;
        let bank = FilterBank::zeros(dims).unwrap();
        let g = apply_filters(&bank, &b, &m, &random_features(42, 3, 0)).unwrap();
        assert!(g.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn constant_filter_is_low_pass() {
        let (b, m) = sphere_setup(1, 25);
        let mut bank = FilterBank::zeros(small_dims(1, 1, 3, 25)).unwrap();
        bank.set_weight(0, 0, 0, 1.0);
        let f = random_features(42, 1, 1);
        let g = apply_filters(&bank, &b, &m, &f).unwrap();
        let want = crate::spectral::low_pass(&b, &m, 25, f.values()).unwrap();
        assert!((g.values() - want).abs().max() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle() {
        // n = k_conv = 30 on a random closed surface
        let m = normalize_mesh(&crate::mesh::make_torus(6, 5, 1.0, 0.4).unwrap()).unwrap().mesh;
        let lap = build_laplacian(&m);
        let basis = eigendecompose(&lap, 30).unwrap();
        let mass = lap.mass.clone();
        let dims = small_dims(3, 2, 4, 30);
        let bank = init_filterbank(11, dims).unwrap();
        let f = random_features(30, 3, 2);
        let g = apply_filters(&bank, &basis, &mass, &f).unwrap();
        let phi = basis.eigenvectors();
        let lam = basis.eigenvalues();
        for lo in 0..2 {
            for v in 0..30 {
                let mut acc = 0.0;
                for li in 0..3 {
                    for e in 0..30 {
                        let mut filt = 0.0;
                        for j in 0..4 {
                            let lj = lam[e].max(0.0) * std::f64::consts::PI * j as f64 / dims.extent;
                            filt += lj.cos() * bank.weight(lo, li, j);
                        }
                        let mut coef = 0.0;
                        for u in 0..30 {
                            coef += phi[(u, e)] * mass[u] * f.values()[(u, li)];
                        }
                        acc += phi[(v, e)] * filt * coef;
                    }
                }
                assert!((g.values()[(v, lo)] - acc).abs() <= 1e-10, "{lo},{v}");
            }
        }
    }

    #[test]
    fn linear_in_features_and_weights() {
        let (b, m) = sphere_setup(1, 30);
        let dims = small_dims(4, 3, 5, 30);
        let b1 = init_filterbank(1, dims).unwrap();
        let b2 = init_filterbank(2, dims).unwrap();
        let f1 = random_features(42, 4, 3);
        let f2 = random_features(42, 4, 4);
        let run = |bank: &FilterBank, f: &FeatureMap| apply_filters(bank, &b, &m, f).unwrap().values().clone();
        let fsum = FeatureMap::new(f1.values() * 2.0 - f2.values(), "mix").unwrap();
        let lhs = run(&b1, &fsum);
        let rhs = run(&b1, &f1) * 2.0 - run(&b1, &f2);
        assert!((lhs - rhs).abs().max() < 1e-10);
        let bsum = FilterBank::new(b1.weights() * 0.5 + b2.weights(), dims).unwrap();
        let lhs = run(&bsum, &f1);
        let rhs = run(&b1, &f1) * 0.5 + run(&b2, &f1);
        assert!((lhs - rhs).abs().max() < 1e-10);
    }

    #[test]
    fn rejects_mismatches() {
        let (b, m) = sphere_setup(1, 20);
        let bank = FilterBank::zeros(small_dims(3, 2, 2, 20)).unwrap();
        assert!(apply_filters(&bank, &b, &m, &random_features(42, 4, 0)).is_err());
        let big = FilterBank::zeros(small_dims(3, 2, 2, 21)).unwrap();
        assert!(apply_filters(&big, &b, &m, &random_features(42, 3, 0)).is_err());
        let mut w = DMatrix::zeros(2, 6);
        w[(0, 0)] = f64::NAN;
        assert!(FilterBank::new(w, small_dims(3, 2, 2, 20)).is_err());
        assert!(FilterBank::new(DMatrix::zeros(2, 5), small_dims(3, 2, 2, 20)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut dims = small_dims(5, 3, 4, 17);
        dims.activation = Activation::Relu;
        let bank = init_filterbank(9, dims).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.dshl");
        write_checkpoint(&bank, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DSHL");
        assert_eq!(bytes.len(), 4 + 4 * 4 + 8 + 1 + 4 + 4 * 3 * 5 * 4);
        assert_eq!(bytes[28], 1);
        // weight [0][1][2] is the 7th float
        let off = 33 + 4 * 6;
        let w = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(w, bank.weight(0, 1, 2) as f32);
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.dims(), bank.dims());
        assert!((back.weights() - bank.weights()).abs().max() < 1e-7);
        std::fs::write(&p, &bytes[..40]).unwrap();
        assert!(read_checkpoint(&p).is_err());
    }
}
