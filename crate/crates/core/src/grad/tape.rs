//! A value-recording tape for reverse-mode differentiation of matrix code.
//!
//! Every operation stores its output value and, while recording, enough
//! structure to push adjoints back to its inputs. Nodes that depend only
//! on constants are never differentiated. With recording switched off the
//! tape is a plain evaluator and intermediate values can be released.

use crate::error::{Error, Result};
use crate::transport::{self, EnergyTerms, MarginalWeights};
use nalgebra::{DMatrix, DVector, Vector3};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Smallest acceptable `min|u_ii| / max|u_ii|` of an LU factorization
/// before a Tikhonov shift is applied.
const PIVOT_RATIO_FLOOR: f64 = 1e-12;
/// Relative Tikhonov shift for near-singular solves.
const TIKHONOV_EPS: f64 = 1e-9;
/// Below this pivot ratio even the shifted system is rejected.
const SINGULAR_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf,
    MatMul(Var, Var),
    TrMatMul(Var, Var),
    MatMulTr(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Relu(Var),
    Columns(Var, usize),
    HCat(Vec<Var>),
    Sum(Var),
    PairwiseSqDist(Var, Var),
    SinkhornRow {
        g: Var,
        c: Var,
        lambda: f64,
        marginals: Arc<MarginalWeights>,
    },
    SinkhornCol {
        f: Var,
        c: Var,
        lambda: f64,
        marginals: Arc<MarginalWeights>,
    },
    PushForward {
        f: Var,
        g: Var,
        c: Var,
        signal: Arc<DMatrix<f64>>,
        lambda: f64,
        marginals: Arc<MarginalWeights>,
    },
    Energy {
        f: Var,
        g: Var,
        c: Var,
        lambda: f64,
        marginals: Arc<MarginalWeights>,
    },
    Solve {
        system: Var,
        rhs: Var,
        shift: f64,
    },
    VertexNormals {
        coords: Var,
        triangles: Arc<Vec<[usize; 3]>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::TrMatMul(..) => "tr_matmul",
            Op::MatMulTr(..) => "matmul_tr",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::Relu(..) => "relu",
            Op::Columns(..) => "columns",
            Op::HCat(..) => "hcat",
            Op::Sum(..) => "sum",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::SinkhornRow { .. } => "sinkhorn_row",
            Op::SinkhornCol { .. } => "sinkhorn_col",
            Op::PushForward { .. } => "pushforward",
            Op::Energy { .. } => "transport_energy",
            Op::Solve { .. } => "solve",
            Op::VertexNormals { .. } => "vertex_normals",
        }
    }
}

struct Node {
    value: Option<DMatrix<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    leaves: Vec<(String, Var)>,
}

/// Adjoints of the registered leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Var, DMatrix<f64>)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Result<&DMatrix<f64>> {
        self.entries
            .iter()
            .find(|e| e.1 == var)
            .map(|e| &e.2)
            .ok_or_else(|| Error::LeafNotFound(format!("node {}", var.0)))
    }

    pub fn by_name(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.entries
            .iter()
            .find(|e| e.0 == name)
            .map(|e| &e.2)
            .ok_or_else(|| Error::LeafNotFound(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.0.as_str()).collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            leaves: Vec::new(),
        }
    }

    /// An evaluator that keeps no backward structure.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Panics if the value was released.
    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        self.nodes[v.0]
            .value
            .as_ref()
            .unwrap_or_else(|| panic!("value of node {} was released", v.0))
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "node {} is not a scalar", v.0);
        m[(0, 0)]
    }

    /// Frees a value that no later backward pass can need.
    /// Does nothing while recording.
    pub fn release(&mut self, v: Var) {
        if !self.recording {
            self.nodes[v.0].value = None;
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.recording && parents.iter().any(|p| self.needs(*p));
        let op = if needs_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Const, &[])
    }

    /// A differentiable input, registered under `name`.
    pub fn leaf(&mut self, name: &str, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: self.recording,
        });
        let v = Var(self.nodes.len() - 1);
        self.leaves.push((name.to_string(), v));
        v
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `aᵀ b`.
    pub fn tr_matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).tr_mul(self.value(b));
        self.push(value, Op::TrMatMul(a, b), &[a, b])
    }

    /// `a bᵀ`.
    pub fn matmul_tr(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b).transpose();
        self.push(value, Op::MatMulTr(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `diag(w) a` for an n×1 weight column `w`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let mut value = self.value(a).clone();
        let wv = self.value(w);
        assert_eq!(wv.shape(), (value.nrows(), 1), "row weights must be a column");
        for (mut row, s) in value.row_iter_mut().zip(wv.iter()) {
            row *= *s;
        }
        self.push(value, Op::ScaleRows(a, w), &[a, w])
    }

    /// `max(a, 0)` elementwise; subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn columns(&mut self, a: Var, start: usize, count: usize) -> Var {
        let value = self.value(a).columns(start, count).into_owned();
        self.push(value, Op::Columns(a, start), &[a])
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut value = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.nrows(), rows, "hcat row mismatch");
            value.columns_mut(at, m.ncols()).copy_from(m);
            at += m.ncols();
        }
        self.push(value, Op::HCat(parts.to_vec()), parts)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// `c_ij = ‖x_i − y_j‖²` between the rows of `x` and `y`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Var {
        let value = transport::pairwise_sq_dist(self.value(x), self.value(y));
        self.push(value, Op::PairwiseSqDist(x, y), &[x, y])
    }

    /// Row-constraint Sinkhorn projection: new `f` (n×1) from `g` (m×1).
    pub fn sinkhorn_row(&mut self, g: Var, c: Var, lambda: f64, marginals: &Arc<MarginalWeights>) -> Var {
        let f = transport::row_potential(
            self.value(g).as_slice(),
            self.value(c),
            marginals.log_b().as_slice(),
            lambda,
        );
        let value = DMatrix::from_vec(f.len(), 1, f);
        let op = Op::SinkhornRow {
            g,
            c,
            lambda,
            marginals: marginals.clone(),
        };
        self.push(value, op, &[g, c])
    }

    /// Column-constraint Sinkhorn projection: new `g` (m×1) from `f` (n×1).
    pub fn sinkhorn_col(&mut self, f: Var, c: Var, lambda: f64, marginals: &Arc<MarginalWeights>) -> Var {
        let g = transport::col_potential(
            self.value(f).as_slice(),
            self.value(c),
            marginals.log_a().as_slice(),
            lambda,
        );
        let value = DMatrix::from_vec(g.len(), 1, g);
        let op = Op::SinkhornCol {
            f,
            c,
            lambda,
            marginals: marginals.clone(),
        };
        self.push(value, op, &[f, c])
    }

    /// `π S` for the coupling implied by potentials `f`, `g` on cost `c`.
    pub fn pushforward(
        &mut self,
        f: Var,
        g: Var,
        c: Var,
        signal: Arc<DMatrix<f64>>,
        lambda: f64,
        marginals: &Arc<MarginalWeights>,
    ) -> Var {
        let pi = coupling(self.value(f), self.value(g), self.value(c), lambda, marginals);
        let value = pi * signal.as_ref();
        let op = Op::PushForward {
            f,
            g,
            c,
            signal,
            lambda,
            marginals: marginals.clone(),
        };
        self.push(value, op, &[f, g, c])
    }

    /// Transport energy as a 1×1 node, plus its split into terms.
    pub fn transport_energy(
        &mut self,
        f: Var,
        g: Var,
        c: Var,
        lambda: f64,
        marginals: &Arc<MarginalWeights>,
    ) -> (Var, EnergyTerms) {
        let terms = transport::energy_terms(
            self.value(f).as_slice(),
            self.value(g).as_slice(),
            self.value(c),
            marginals,
            lambda,
        );
        let value = DMatrix::from_element(1, 1, terms.total);
        let op = Op::Energy {
            f,
            g,
            c,
            lambda,
            marginals: marginals.clone(),
        };
        (self.push(value, op, &[f, g, c]), terms)
    }

    /// `system⁻¹ rhs` by partial-pivot LU. Near-singular systems are shifted
    /// by `1e-9·max|diag|` along the diagonal.
    pub fn solve(&mut self, system: Var, rhs: Var) -> Result<Var> {
        let a = self.value(system);
        let (x, shift) = solve_shifted(a, self.value(rhs))?;
        Ok(self.push(x, Op::Solve { system, rhs, shift }, &[system, rhs]))
    }

    /// Unit vertex normals of the n×3 coordinates `coords`.
    pub fn vertex_normals(&mut self, coords: Var, triangles: &Arc<Vec<[usize; 3]>>) -> Var {
        let value = crate::mesh::vertex_normals_matrix(self.value(coords), triangles);
        let op = Op::VertexNormals {
            coords,
            triangles: triangles.clone(),
        };
        self.push(value, op, &[coords])
    }

    /// Adjoints of every registered leaf with respect to the 1×1 `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::InvalidArgument("backward on a non-recording tape".into()));
        }
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward root must be 1×1, got {:?}",
                rv.shape()
            )));
        }
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(bar) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if bar.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "adjoint of node {idx} ({})",
                    node.op.name()
                )));
            }
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(bar);
                continue;
            }
            for (parent, contribution) in self.pullback(idx, &bar)? {
                if !self.needs(parent) {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => *acc += contribution,
                    slot => *slot = Some(contribution),
                }
            }
        }
        let entries = self
            .leaves
            .iter()
            .filter(|(_, v)| v.0 <= root.0)
            .map(|(name, v)| {
                let g = adj[v.0]
                    .clone()
                    .unwrap_or_else(|| DMatrix::zeros(self.value(*v).nrows(), self.value(*v).ncols()));
                (name.clone(), *v, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    /// Adjoint contributions of node `idx` to its parents.
    fn pullback(&self, idx: usize, bar: &DMatrix<f64>) -> Result<Vec<(Var, DMatrix<f64>)>> {
        let out = self.nodes[idx].value.as_ref();
        let v = |x: &Var| self.value(*x);
        let want = |x: &Var| self.needs(*x);
        let mut res = Vec::new();
        match &self.nodes[idx].op {
            Op::Const | Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    res.push((*a, bar * v(b).transpose()));
                }
                if want(b) {
                    res.push((*b, v(a).tr_mul(bar)));
                }
            }
            Op::TrMatMul(a, b) => {
                if want(a) {
                    res.push((*a, v(b) * bar.transpose()));
                }
                if want(b) {
                    res.push((*b, v(a) * bar));
                }
            }
            Op::MatMulTr(a, b) => {
                if want(a) {
                    res.push((*a, bar * v(b)));
                }
                if want(b) {
                    res.push((*b, bar.tr_mul(v(a))));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, bar.clone()));
                res.push((*b, bar.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, bar.clone()));
                res.push((*b, -bar));
            }
            Op::Scale(a, s) => res.push((*a, bar * *s)),
            Op::ScaleRows(a, w) => {
                let wv = v(w);
                if want(a) {
                    let mut g = bar.clone();
                    for (mut row, s) in g.row_iter_mut().zip(wv.iter()) {
                        row *= *s;
                    }
                    res.push((*a, g));
                }
                if want(w) {
                    let av = v(a);
                    let gw = DMatrix::from_fn(wv.nrows(), 1, |i, _| bar.row(i).dot(&av.row(i)));
                    res.push((*w, gw));
                }
            }
            Op::Relu(a) => {
                let av = v(a);
                res.push((*a, bar.zip_map(av, |g, x| if x > 0.0 { g } else { 0.0 })));
            }
            Op::Columns(a, start) => {
                let av = v(a);
                let mut g = DMatrix::zeros(av.nrows(), av.ncols());
                g.columns_mut(*start, bar.ncols()).copy_from(bar);
                res.push((*a, g));
            }
            Op::HCat(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = v(p).ncols();
                    res.push((*p, bar.columns(at, w).into_owned()));
                    at += w;
                }
            }
            Op::Sum(a) => {
                let av = v(a);
                res.push((*a, DMatrix::from_element(av.nrows(), av.ncols(), bar[(0, 0)])));
            }
            Op::PairwiseSqDist(x, y) => {
                let (xv, yv) = (v(x), v(y));
                if want(x) {
                    let mut g = bar * yv * -2.0;
                    for (i, mut row) in g.row_iter_mut().enumerate() {
                        row += xv.row(i) * (2.0 * bar.row(i).sum());
                    }
                    res.push((*x, g));
                }
                if want(y) {
                    let mut g = bar.tr_mul(xv) * -2.0;
                    for (j, mut row) in g.row_iter_mut().enumerate() {
                        row += yv.row(j) * (2.0 * bar.column(j).sum());
                    }
                    res.push((*y, g));
                }
            }
            Op::SinkhornRow {
                g,
                c,
                lambda,
                marginals,
            } => {
                let f = out.expect("sinkhorn output");
                let (gv, cv) = (v(g), v(c));
                // w_ij = b_j exp((f_i + g_j − c_ij)/λ), rows sum to one
                let logb = marginals.log_b();
                let w = DMatrix::from_fn(cv.nrows(), cv.ncols(), |i, j| {
                    bar[(i, 0)] * (logb[j] + (f[(i, 0)] + gv[(j, 0)] - cv[(i, j)]) / lambda).exp()
                });
                if want(g) {
                    let gg = DMatrix::from_fn(gv.nrows(), 1, |j, _| -w.column(j).sum());
                    res.push((*g, gg));
                }
                if want(c) {
                    res.push((*c, w));
                }
            }
            Op::SinkhornCol {
                f,
                c,
                lambda,
                marginals,
            } => {
                let g = out.expect("sinkhorn output");
                let (fv, cv) = (v(f), v(c));
                let loga = marginals.log_a();
                let w = DMatrix::from_fn(cv.nrows(), cv.ncols(), |i, j| {
                    bar[(j, 0)] * (loga[i] + (fv[(i, 0)] + g[(j, 0)] - cv[(i, j)]) / lambda).exp()
                });
                if want(f) {
                    let gf = DMatrix::from_fn(fv.nrows(), 1, |i, _| -w.row(i).sum());
                    res.push((*f, gf));
                }
                if want(c) {
                    res.push((*c, w));
                }
            }
            Op::PushForward {
                f,
                g,
                c,
                signal,
                lambda,
                marginals,
            } => {
                let pi = coupling(v(f), v(g), v(c), *lambda, marginals);
                let t = (bar * signal.transpose()).component_mul(&pi) / *lambda;
                res.extend(potential_adjoints(&t, f, g, c, &want));
            }
            Op::Energy {
                f,
                g,
                c,
                lambda,
                marginals,
            } => {
                let (fv, gv) = (v(f), v(g));
                let pi = coupling(fv, gv, v(c), *lambda, marginals);
                let e = bar[(0, 0)];
                let s = DMatrix::from_fn(pi.nrows(), pi.ncols(), |i, j| fv[(i, 0)] + gv[(j, 0)]);
                if want(f) || want(g) {
                    let t = pi.component_mul(&s) * (e / lambda);
                    if want(f) {
                        res.push((*f, DMatrix::from_fn(t.nrows(), 1, |i, _| t.row(i).sum())));
                    }
                    if want(g) {
                        res.push((*g, DMatrix::from_fn(t.ncols(), 1, |j, _| t.column(j).sum())));
                    }
                }
                if want(c) {
                    let gc = pi.zip_map(&s, |p, s| -e * p * (s - lambda) / lambda);
                    res.push((*c, gc));
                }
            }
            Op::Solve { system, rhs, shift } => {
                let x = out.expect("solve output");
                let mut at = v(system).transpose();
                for i in 0..at.nrows() {
                    at[(i, i)] += shift;
                }
                let y = at
                    .lu()
                    .solve(bar)
                    .ok_or(Error::Singular {
                        k: x.nrows(),
                        rcond: 0.0,
                    })?;
                if want(system) {
                    res.push((*system, -(&y * x.transpose())));
                }
                if want(rhs) {
                    res.push((*rhs, y));
                }
            }
            Op::VertexNormals { coords, triangles } => {
                res.push((*coords, normals_pullback(v(coords), triangles, bar)));
            }
        }
        Ok(res)
    }
}

/// Dense `π_ij = a_i b_j exp((f_i + g_j − c_ij)/λ)`.
fn coupling(
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
    c: &DMatrix<f64>,
    lambda: f64,
    marginals: &MarginalWeights,
) -> DMatrix<f64> {
    let (la, lb) = (marginals.log_a(), marginals.log_b());
    DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
        (la[i] + lb[j] + (f[(i, 0)] + g[(j, 0)] - c[(i, j)]) / lambda).exp()
    })
}

/// Pulls `t = ∂L/∂(log π)·(1/λ)·λ` back to `f`, `g` and `c`.
fn potential_adjoints(
    t: &DMatrix<f64>,
    f: &Var,
    g: &Var,
    c: &Var,
    want: &dyn Fn(&Var) -> bool,
) -> Vec<(Var, DMatrix<f64>)> {
    let mut res = Vec::new();
    if want(f) {
        res.push((*f, DMatrix::from_fn(t.nrows(), 1, |i, _| t.row(i).sum())));
    }
    if want(g) {
        res.push((*g, DMatrix::from_fn(t.ncols(), 1, |j, _| t.column(j).sum())));
    }
    if want(c) {
        res.push((*c, -t));
    }
    res
}

/// Solves `a x = b`, shifting the diagonal if the pivots are too uneven.
/// Returns the solution and the shift used.
pub(crate) fn solve_shifted(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "cannot solve {:?} system with {:?} right-hand side",
            a.shape(),
            b.shape()
        )));
    }
    let k = a.nrows();
    let ratio = |m: &DMatrix<f64>| {
        let lu = m.clone().lu();
        let d = lu.u().diagonal().map(f64::abs);
        let (lo, hi) = (d.min(), d.max());
        let r = if hi > 0.0 { lo / hi } else { 0.0 };
        (lu, r)
    };
    let (lu, r) = ratio(a);
    if r >= PIVOT_RATIO_FLOOR {
        let x = lu.solve(b).ok_or(Error::Singular { k, rcond: r })?;
        return Ok((x, 0.0));
    }
    let scale = a.diagonal().map(f64::abs).max().max(f64::MIN_POSITIVE);
    let shift = TIKHONOV_EPS * scale;
    log::warn!("near-singular {k}×{k} solve (pivot ratio {r:.2e}); shifting by {shift:.2e}");
    let mut shifted = a.clone();
    for i in 0..k {
        shifted[(i, i)] += shift;
    }
    let (lu, r2) = ratio(&shifted);
    if r2 < SINGULAR_FLOOR {
        return Err(Error::Singular { k, rcond: r2 });
    }
    let x = lu.solve(b).ok_or(Error::Singular { k, rcond: r2 })?;
    Ok((x, shift))
}

/// Reverse pass of normalized area-weighted vertex normals.
fn normals_pullback(coords: &DMatrix<f64>, triangles: &[[usize; 3]], bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = coords.nrows();
    let p = |i: usize| Vector3::new(coords[(i, 0)], coords[(i, 1)], coords[(i, 2)]);
    let mut acc = vec![Vector3::zeros(); n];
    for t in triangles {
        let c = (p(t[1]) - p(t[0])).cross(&(p(t[2]) - p(t[0])));
        for &i in t {
            acc[i] += c;
        }
    }
    // adjoint of the unnormalized sums; fallback vertices are constant
    let acc_bar: Vec<Vector3<f64>> = acc
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let len = a.norm();
            if len > f64::MIN_POSITIVE {
                let u = a / len;
                let nb = Vector3::new(bar[(i, 0)], bar[(i, 1)], bar[(i, 2)]);
                (nb - u * u.dot(&nb)) / len
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    let mut out = DMatrix::zeros(n, 3);
    for t in triangles {
        let (a, b, c) = (p(t[0]), p(t[1]), p(t[2]));
        let (e1, e2) = (b - a, c - a);
        let fb = acc_bar[t[0]] + acc_bar[t[1]] + acc_bar[t[2]];
        let g1 = e2.cross(&fb);
        let g2 = fb.cross(&e1);
        for d in 0..3 {
            out[(t[0], d)] -= g1[d] + g2[d];
            out[(t[1], d)] += g1[d];
            out[(t[2], d)] += g2[d];
        }
    }
    out
}

/// Convenience: a column vector as an n×1 matrix.
pub fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x` against the tape gradient.
    fn check<F>(x: &DMatrix<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf("x", x.clone());
        let root = build(&mut tape, leaf);
        let grad = tape.backward(root).unwrap().get(leaf).unwrap().clone();
        let eval = |xx: &DMatrix<f64>| {
            let mut t = Tape::inference();
            let l = t.constant(xx.clone());
            let r = build(&mut t, l);
            t.scalar(r)
        };
        let h = 1e-5;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let err = (fd - grad[idx]).abs() / (1.0 + fd.abs());
            assert!(err <= tol, "entry {idx}: fd {fd} vs tape {}", grad[idx]);
        }
    }

    /// `Σ v ⊙ W` for a fixed random `W`.
    fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let (n, m) = tape.value(v).shape();
        let w = random(n, m, seed);
        let mut total: Option<Var> = None;
        for a in 0..m {
            let col = tape.columns(v, a, 1);
            let wc = tape.constant(column(&w.column(a).into_owned()));
            let prod = tape.scale_rows(col, wc);
            let s = tape.sum(prod);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        total.unwrap()
    }

    #[test]
    fn chain_rule_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf("w", DMatrix::from_element(1, 1, 2.0));
        let three_w = tape.scale(w, 3.0);
        let sq = tape.matmul(three_w, three_w);
        assert_eq!(tape.scalar(sq), 36.0);
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(w).unwrap()[(0, 0)], 36.0);
    }

    #[test]
    fn generic_ops() {
        let x = random(4, 3, 1);
        check(&x, |t, v| {
            let c = t.constant(random(3, 5, 2));
            let m = t.matmul(v, c);
            let r = t.relu(m);
            probe(t, r, 3)
        }, 1e-7);
        check(&x, |t, v| {
            let w = t.columns(v, 1, 1);
            let s = t.scale_rows(v, w);
            let c = t.constant(random(4, 2, 4));
            let h = t.hcat(&[s, c, v]);
            let d = t.sub(h, h);
            let e = t.add(h, d);
            let e = t.scale(e, 0.7);
            probe(t, e, 5)
        }, 1e-7);
        check(&x, |t, v| {
            let g = t.tr_matmul(v, v);
            probe(t, g, 6)
        }, 1e-7);
    }

    #[test]
    fn pairwise_distance_gradient() {
        let x = random(5, 3, 7);
        check(&x, |t, v| {
            let y = t.constant(random(4, 3, 8));
            let c = t.pairwise_sq_dist(v, y);
            let c2 = t.pairwise_sq_dist(y, v);
            let p = probe(t, c, 9);
            let q = probe(t, c2, 10);
            t.add(p, q)
        }, 1e-7);
    }

    #[test]
    fn sinkhorn_gradient_wrt_cost() {
        let c0 = random(6, 5, 10).map(|x| x.abs());
        let mw = Arc::new(MarginalWeights::new(&[1.0, 2.0, 1.0, 3.0, 1.0, 1.0], &[2.0, 1.0, 1.0, 1.0, 2.0]).unwrap());
        check(&c0, |t, c| {
            let mut g = t.constant(DMatrix::zeros(5, 1));
            let mut f = g;
            for _ in 0..4 {
                f = t.sinkhorn_row(g, c, 0.2, &mw);
                g = t.sinkhorn_col(f, c, 0.2, &mw);
            }
            let (e, _) = t.transport_energy(f, g, c, 0.2, &mw);
            let z = t.pushforward(f, g, c, Arc::new(random(5, 2, 11)), 0.2, &mw);
            let p = probe(t, z, 12);
            t.add(e, p)
        }, 1e-6);
    }

    #[test]
    fn solve_adjoint_matches_differences() {
        let a = random(8, 8, 13) + DMatrix::identity(8, 8) * 4.0;
        check(&a, |t, v| {
            let r = t.constant(random(8, 3, 14));
            let x = t.solve(v, r).unwrap();
            probe(t, x, 15)
        }, 1e-6);
        let r = random(8, 3, 16);
        check(&r, |t, v| {
            let a = t.constant(random(8, 8, 13) + DMatrix::identity(8, 8) * 4.0);
            let x = t.solve(a, v).unwrap();
            probe(t, x, 17)
        }, 1e-6);
    }

    #[test]
    fn near_singular_solve_is_shifted() {
        let mut a = DMatrix::identity(3, 3);
        a[(2, 2)] = 1e-14;
        let (x, shift) = solve_shifted(&a, &DMatrix::from_element(3, 1, 1.0)).unwrap();
        assert!(shift > 0.0);
        assert!(x.iter().all(|v| v.is_finite()));
        assert!(matches!(
            solve_shifted(&DMatrix::zeros(3, 3), &DMatrix::zeros(3, 1)),
            Err(Error::Singular { k: 3, .. })
        ));
    }

    #[test]
    fn normals_gradient() {
        let m = crate::mesh::make_icosphere(1, 1.0).unwrap();
        let m = crate::mesh::deform_lowfreq(&m, 1, 0.3).unwrap();
        let tris = Arc::new(m.triangles().to_vec());
        check(&m.coords_matrix(), |t, v| {
            let n = t.vertex_normals(v, &tris);
            probe(t, n, 18)
        }, 1e-6);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf("gamma", random(2, 2, 1));
        let c = tape.constant(random(2, 2, 2));
        let p = tape.matmul(w, c);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.names(), vec!["gamma"]);
        assert!(matches!(g.get(c), Err(Error::LeafNotFound(_))));
        assert!(matches!(g.by_name("features"), Err(Error::LeafNotFound(_))));
    }

    #[test]
    fn backward_is_linear_in_roots() {
        let x = random(3, 3, 20);
        let build = |t: &mut Tape, v: Var, which: u8| {
            let r = t.relu(v);
            let m = t.matmul(r, v);
            match which {
                0 => probe(t, m, 21),
                1 => probe(t, r, 22),
                _ => {
                    let a = probe(t, m, 21);
                    let b = probe(t, r, 22);
                    t.add(a, b)
                }
            }
        };
        let grad = |which| {
            let mut t = Tape::new();
            let v = t.leaf("x", x.clone());
            let r = build(&mut t, v, which);
            t.backward(r).unwrap().get(v).unwrap().clone()
        };
        let sum = grad(0) + grad(1);
        assert!((sum - grad(2)).abs().max() <= 1e-12);
    }

    #[test]
    fn non_finite_adjoint_is_reported() {
        let mut tape = Tape::new();
        let w = tape.leaf("w", DMatrix::from_element(1, 1, 1.0));
        let s = tape.scale(w, f64::INFINITY);
        let z = tape.scale(s, 0.0);
        let err = tape.backward(z).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("node 0")), "{err}");
    }

    #[test]
    fn inference_mode_records_nothing() {
        let mut tape = Tape::inference();
        let w = tape.leaf("w", DMatrix::from_element(2, 2, 1.0));
        let p = tape.matmul(w, w);
        tape.release(w);
        assert_eq!(tape.value(p)[(0, 0)], 2.0);
        let s = tape.sum(p);
        assert!(tape.backward(s).is_err());
    }
}
