#![allow(dead_code)]

use deepshells::filters::{filter_response, init_filterbank, FilterBank, FilterDims};
use deepshells::mesh::{deform_lowfreq, TriMesh};
use deepshells::shells::{PreparedShape, Schedule, ShellConfig};
use deepshells::shot::{ShotConfig, DESCRIPTOR_DIM};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Genus-0 sphere-like mesh: `rings` latitude rings of `segs` vertices,
/// alternate rings offset by half a segment, both end rings fan-capped.
pub fn barrel(rings: usize, segs: usize) -> TriMesh {
    let mut v = Vec::new();
    for r in 0..rings {
        let theta = std::f64::consts::PI * (r as f64 + 0.5) / rings as f64;
        for s in 0..segs {
            let phi = std::f64::consts::TAU * (s as f64 + 0.5 * (r % 2) as f64) / segs as f64;
            v.push(Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
        }
    }
    let id = |r: usize, s: usize| r * segs + s % segs;
    let mut t = Vec::new();
    for r in 0..rings - 1 {
        for s in 0..segs {
            if r % 2 == 0 {
                t.push([id(r, s), id(r + 1, s), id(r, s + 1)]);
                t.push([id(r, s + 1), id(r + 1, s), id(r + 1, s + 1)]);
            } else {
                t.push([id(r, s), id(r + 1, s), id(r + 1, s + 1)]);
                t.push([id(r, s), id(r + 1, s + 1), id(r, s + 1)]);
            }
        }
    }
    let last = rings - 1;
    for s in 1..segs - 1 {
        t.push([id(0, 0), id(0, s + 1), id(0, s)]);
        t.push([id(last, 0), id(last, s), id(last, s + 1)]);
    }
    TriMesh::new(v, t).unwrap()
}

/// SHOT radius for meshes of a few dozen vertices; the default leaves most
/// neighborhoods empty.
pub fn tiny_shot() -> ShotConfig {
    ShotConfig {
        radius_fraction: 0.3,
        ..Default::default()
    }
}

/// Two 40-vertex shapes, `k_conv = 20`, schedule `{4, 6}`, three Sinkhorn
/// projections.
pub struct TinyInstance {
    pub x: PreparedShape,
    pub y: PreparedShape,
    pub bank: FilterBank,
    pub schedule: Schedule,
    pub cfg: ShellConfig,
}

pub fn tiny_instance() -> TinyInstance {
    let base = barrel(5, 8);
    let other = deform_lowfreq(&base, 1, 0.1).unwrap();
    let mut dims = FilterDims::new(DESCRIPTOR_DIM);
    dims.k_conv = 20;
    TinyInstance {
        x: PreparedShape::prepare(&base, 20, &tiny_shot()).unwrap(),
        y: PreparedShape::prepare(&other, 20, &tiny_shot()).unwrap(),
        bank: init_filterbank(7, dims).unwrap(),
        schedule: Schedule::new(vec![4, 6]).unwrap(),
        cfg: ShellConfig {
            sinkhorn_iters: 3,
            ..Default::default()
        },
    }
}

pub fn with_weight(bank: &FilterBank, entry: (usize, usize), value: f64) -> FilterBank {
    let mut w = bank.weights().clone();
    w[entry] = value;
    let mut b = bank.clone();
    b.set_weights(w).unwrap();
    b
}

/// Whether moving `entry` by `±h` flips the sign of a pre-activation on any
/// of `shapes`, which puts a ReLU kink inside the difference stencil.
pub fn crosses_kink(bank: &FilterBank, shapes: &[&PreparedShape], entry: (usize, usize), h: f64) -> bool {
    let w0 = bank.weights()[entry];
    let plus = with_weight(bank, entry, w0 + h);
    let minus = with_weight(bank, entry, w0 - h);
    shapes.iter().any(|s| {
        let a = filter_response(&plus, &s.basis, &s.mass, &s.features).unwrap();
        let b = filter_response(&minus, &s.basis, &s.mass, &s.features).unwrap();
        a.column(entry.0)
            .iter()
            .zip(b.column(entry.0).iter())
            .any(|(p, m)| (*p > 0.0) != (*m > 0.0))
    })
}

/// Input channels carrying nonzero descriptor mass on any of `shapes`.
pub fn active_channels(shapes: &[&PreparedShape]) -> Vec<usize> {
    (0..DESCRIPTOR_DIM)
        .filter(|&l| shapes.iter().any(|s| s.features.values().column(l).norm() > 0.0))
        .collect()
}

/// `|fd − an| / max(|fd|, |an|, floor)`.
pub fn relative_error(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

/// `count` weight entries on active input channels whose stencil stays
/// on one side of every ReLU kink.
pub fn sample_entries(inst: &TinyInstance, seed: u64, count: usize, step: f64) -> Vec<(usize, usize)> {
    let shapes = [&inst.x, &inst.y];
    let active = active_channels(&shapes);
    let (rows, _) = inst.bank.weights().shape();
    let j = inst.bank.dims().basis_functions;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let entry = (
            rng.random_range(0..rows),
            active[rng.random_range(0..active.len())] * j + rng.random_range(0..j),
        );
        if !out.contains(&entry) && !crosses_kink(&inst.bank, &shapes, entry, step) {
            out.push(entry);
        }
    }
    out
}
