//! Fast property checks on synthetic shapes, one line per check.

use crate::{CliResult, Failure};
use deepshells::eval::{conformal_distortion, geodesic_error, ErrorNorm};
use deepshells::grad::Tape;
use deepshells::mesh::{make_icosphere, normalize_mesh, permute_vertices};
use deepshells::shells::{match_features, PreparedShape, Schedule, ShellConfig};
use deepshells::shot::{FeatureMap, ShotConfig};
use deepshells::spectral::{build_laplacian, eigendecompose, max_relative_residual};
use deepshells::transport::{embedding_cost, sinkhorn, HardCorrespondence, MarginalWeights};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

type Outcome = Result<(), Box<dyn std::error::Error>>;
type Check = fn() -> Outcome;

const CHECKS: &[(&str, Check)] = &[
    ("laplacian_symmetric_zero_rows", laplacian),
    ("eigenpairs_orthonormal_and_accurate", eigenpairs),
    ("sinkhorn_marginals", sinkhorn_marginals),
    ("solve_adjoint_matches_finite_differences", solve_adjoint),
    ("permuted_copy_matches_itself", self_match),
    ("identity_map_scores", identity_scores),
];

pub fn run() -> CliResult<()> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        let start = std::time::Instant::now();
        match check() {
            Ok(()) => println!("PASS {name} ({:.2}s)", start.elapsed().as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} of {} self-checks failed", CHECKS.len())));
    }
    Ok(())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg().into())
    }
}

fn laplacian() -> Outcome {
    let mesh = normalize_mesh(&make_icosphere(2, 1.0)?)?.mesh;
    let w = build_laplacian(&mesh).stiffness_dense();
    let asym = (&w - w.transpose()).amax();
    let row = w.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
    ensure(asym <= 1e-12 && row <= 1e-10, || format!("asymmetry {asym:.2e}, row sum {row:.2e}"))
}

fn eigenpairs() -> Outcome {
    let mesh = normalize_mesh(&make_icosphere(2, 1.0)?)?.mesh;
    let lap = build_laplacian(&mesh);
    let basis = eigendecompose(&lap, 30)?;
    let phi = basis.eigenvectors();
    let gram = phi.transpose() * DMatrix::from_diagonal(&lap.mass) * phi;
    let ortho = (gram - DMatrix::identity(30, 30)).amax();
    let residual = max_relative_residual(&lap, &basis);
    ensure(ortho <= 1e-8 && residual <= 1.0, || {
        format!("orthonormality {ortho:.2e}, residual-to-tolerance ratio {residual:.2e}")
    })
}

fn sinkhorn_marginals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(40, 3, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-1.0..1.0));
    let cost = Arc::new(embedding_cost(&x, &y)?);
    let marginals = Arc::new(MarginalWeights::uniform(40, 50)?);
    let corr = sinkhorn(cost, marginals, 0.12, 500)?;
    let res = corr.marginal_residual();
    ensure(res <= 1e-6, || format!("marginal residual {res:.2e}"))
}

fn solve_adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a0 = DMatrix::from_fn(6, 6, |i, j| rng.random_range(-1.0..1.0) + if i == j { 6.0 } else { 0.0 });
    let b0 = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
    let loss = |a: &DMatrix<f64>| -> deepshells::Result<(f64, DMatrix<f64>)> {
        let mut tape = Tape::new();
        let av = tape.leaf("a", a.clone());
        let bv = tape.constant(b0.clone());
        let x = tape.solve(av, bv)?;
        let sq = tape.pairwise_sq_dist(x, x);
        let s = tape.sum(sq);
        let g = tape.backward(s)?;
        Ok((tape.scalar(s), g.by_name("a")?.clone()))
    };
    let (_, grad) = loss(&a0)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, j) in [(0, 0), (1, 4), (5, 2), (3, 3)] {
        let mut ap = a0.clone();
        ap[(i, j)] += h;
        let mut am = a0.clone();
        am[(i, j)] -= h;
        let fd = (loss(&ap)?.0 - loss(&am)?.0) / (2.0 * h);
        worst = worst.max((fd - grad[(i, j)]).abs() / fd.abs().max(1e-6));
    }
    ensure(worst <= 1e-6, || format!("relative error {worst:.2e}"))
}

fn self_match() -> Outcome {
    let mesh = make_icosphere(2, 1.0)?;
    let (copy, perm) = permute_vertices(&mesh, 42);
    let shot = ShotConfig {
        radius_fraction: 0.2,
        ..Default::default()
    };
    let x = PreparedShape::prepare(&mesh, 60, &shot)?;
    let y = PreparedShape::prepare(&copy, 60, &shot)?;
    let gx = FeatureMap::new(x.mesh.coords_matrix() * 10.0, "coords")?;
    let gy = FeatureMap::new(y.mesh.coords_matrix() * 10.0, "coords")?;
    let schedule = Schedule::testing(60)?;
    let (map, _) = match_features(&x, &y, &gx, &gy, &schedule, &ShellConfig::default())?;
    let hits = (0..map.len()).filter(|&i| map.as_slice()[i] == perm[i]).count();
    ensure(hits == map.len(), || format!("{hits}/{} vertices recovered", map.len()))
}

fn identity_scores() -> Outcome {
    let mesh = make_icosphere(2, 1.0)?;
    let id = HardCorrespondence::identity(mesh.num_vertices());
    let err = geodesic_error(&mesh, &id, &id, ErrorNorm::SqrtArea)?;
    let dist = conformal_distortion(&mesh, &mesh, &id)?;
    let mean = DVector::from_vec(dist.values.clone()).mean();
    ensure(err.mean_error == 0.0 && mean == 2.0, || {
        format!("mean error {}, mean distortion {mean}", err.mean_error)
    })
}
