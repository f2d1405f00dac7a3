//! Element assembly of the elliptic grid generation forms.
//!
//! Unknown vectors hold the interior coefficients of both components:
//! `[x_1 interior..., x_2 interior...]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryCurves, Side};
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, SparseLu};
use crate::quadrature::{gauss_legendre, BasisTable, QuadRule};
use crate::thb::{GeometryMap, Jet, MapJet, PointBasis, ThbSpace};

pub const DEFAULT_EPS: f64 = 1e-4;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tau {
    #[default]
    Id,
    Div,
    Ls,
}

impl std::str::FromStr for Tau {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "id" => Ok(Tau::Id),
            "div" => Ok(Tau::Div),
            "ls" => Ok(Tau::Ls),
            _ => Err(Error::InvalidArgument(format!("unknown tau '{s}' (expected id, div or ls)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EggParams {
    pub tau: Tau,
    pub mu: f64,
    pub eps: f64,
}

impl Default for EggParams {
    fn default() -> Self {
        Self { tau: Tau::Id, mu: 0.0, eps: DEFAULT_EPS }
    }
}

/// Control-map data at every point of a rule: `T`, `det T`, `P^1`, `P^2`.
#[derive(Clone, Debug)]
pub struct ControlData {
    pub t: Vec<Mat2>,
    pub det_t: Vec<f64>,
    pub p1: Vec<Mat2>,
    pub p2: Vec<Mat2>,
}

impl ControlData {
    pub fn identity(n: usize) -> Self {
        Self {
            t: vec![[[1.0, 0.0], [0.0, 1.0]]; n],
            det_t: vec![1.0; n],
            p1: vec![[[0.0; 2]; 2]; n],
            p2: vec![[[0.0; 2]; 2]; n],
        }
    }
}

pub fn ddot(a: &Mat2, b: &Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

pub fn det2(a: &Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

/// `d det / d J`.
pub fn cofactor(j: &Mat2) -> Mat2 {
    [[j[1][1], -j[1][0]], [-j[0][1], j[0][0]]]
}

/// First fundamental form `(g11, g12, g22)` of a Jacobian.
pub fn metric(j: &Mat2) -> (f64, f64, f64) {
    let g11 = j[0][0] * j[0][0] + j[1][0] * j[1][0];
    let g12 = j[0][0] * j[0][1] + j[1][0] * j[1][1];
    let g22 = j[0][1] * j[0][1] + j[1][1] * j[1][1];
    (g11, g12, g22)
}

/// `A(x) = [[g22, -g12], [-g12, g11]] / (g11 + g22 + eps)`.
pub fn a_matrix(j: &Mat2, eps: f64) -> Mat2 {
    let (g11, g12, g22) = metric(j);
    let s = g11 + g22 + eps;
    [[g22 / s, -g12 / s], [-g12 / s, g11 / s]]
}

fn d_a_matrix(j: &Mat2, dj: &Mat2, eps: f64) -> Mat2 {
    let (g11, g12, g22) = metric(j);
    let dg11 = 2.0 * (j[0][0] * dj[0][0] + j[1][0] * dj[1][0]);
    let dg12 = j[0][0] * dj[0][1] + dj[0][0] * j[0][1] + j[1][0] * dj[1][1] + dj[1][0] * j[1][1];
    let dg22 = 2.0 * (j[0][1] * dj[0][1] + j[1][1] * dj[1][1]);
    let s = g11 + g22 + eps;
    let ds = dg11 + dg22;
    let f = ds / (s * s);
    [[dg22 / s - g22 * f, -dg12 / s + g12 * f], [-dg12 / s + g12 * f, dg11 / s - g11 * f]]
}

/// `gamma = tr(A_mu) / (A_mu : A_mu)`.
pub fn gamma(a_mu: &Mat2) -> f64 {
    (a_mu[0][0] + a_mu[1][1]) / ddot(a_mu, a_mu)
}

fn jet_hessian(j: &Jet) -> Mat2 {
    [[j[3], j[4]], [j[4], j[5]]]
}

/// Quantities at one quadrature point that do not depend on the test function.
#[derive(Clone, Copy, Debug)]
pub struct PointState {
    pub jac: Mat2,
    pub a: Mat2,
    pub a_mu: Mat2,
    pub gamma: f64,
    /// `H~(x_c)` per component.
    pub htil: [Mat2; 2],
    /// `A : H~(x_c)`.
    pub ah: [f64; 2],
    pub p1: Mat2,
    pub p2: Mat2,
    pub det_t: f64,
}

impl PointState {
    pub fn new(mj: &MapJet, ctrl: Option<(&Mat2, &Mat2, f64)>, prm: &EggParams) -> Self {
        let a = a_matrix(&mj.jac, prm.eps);
        let a_mu = [[a[0][0] + prm.mu, a[0][1]], [a[1][0], a[1][1] + prm.mu]];
        let (p1, p2, det_t) = match ctrl {
            Some((p1, p2, d)) => (*p1, *p2, d),
            None => ([[0.0; 2]; 2], [[0.0; 2]; 2], 1.0),
        };
        let mut htil = [[[0.0; 2]; 2]; 2];
        for c in 0..2 {
            htil[c] = htilde(&mj.hess[c], mj.jac[c], &p1, &p2, det_t, ctrl.is_some());
        }
        let ah = [ddot(&a, &htil[0]), ddot(&a, &htil[1])];
        Self { jac: mj.jac, a, a_mu, gamma: gamma(&a_mu), htil, ah, p1, p2, det_t }
    }

    /// `tau` applied to a scalar test function.
    pub fn tau(&self, tau: Tau, jet: &Jet) -> f64 {
        match tau {
            Tau::Id => jet[0],
            Tau::Div => self.gamma * (jet[3] + jet[5]),
            Tau::Ls => ddot(&self.a_mu, &jet_hessian(jet)),
        }
    }

    /// `H~` of a scalar function from its jet.
    pub fn htil_of(&self, jet: &Jet) -> Mat2 {
        htilde(&jet_hessian(jet), [jet[1], jet[2]], &self.p1, &self.p2, self.det_t, true)
    }
}

fn htilde(h: &Mat2, grad: [f64; 2], p1: &Mat2, p2: &Mat2, det_t: f64, with_ctrl: bool) -> Mat2 {
    if !with_ctrl {
        return *h;
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = (h[i][j] + p1[i][j] * grad[0] + p2[i][j] * grad[1]) * det_t;
        }
    }
    out
}

/// Derivative of the point state along a perturbation of the map.
#[derive(Clone, Copy, Debug)]
struct DirState {
    da: Mat2,
    dgamma: f64,
    /// `d(A : H~(x_c))`.
    dah: [f64; 2],
}

impl DirState {
    fn new(ps: &PointState, djac: &Mat2, dhtil: &[Mat2; 2], eps: f64) -> Self {
        let da = d_a_matrix(&ps.jac, djac, eps);
        let aa = ddot(&ps.a_mu, &ps.a_mu);
        let tr = ps.a_mu[0][0] + ps.a_mu[1][1];
        let dgamma = (da[0][0] + da[1][1]) / aa - tr * 2.0 * ddot(&ps.a_mu, &da) / (aa * aa);
        let dah = [
            ddot(&da, &ps.htil[0]) + ddot(&ps.a, &dhtil[0]),
            ddot(&da, &ps.htil[1]) + ddot(&ps.a, &dhtil[1]),
        ];
        Self { da, dgamma, dah }
    }

    fn dtau(&self, tau: Tau, jet: &Jet) -> f64 {
        match tau {
            Tau::Id => 0.0,
            Tau::Div => self.dgamma * (jet[3] + jet[5]),
            Tau::Ls => ddot(&self.da, &jet_hessian(jet)),
        }
    }
}

/// Interior/boundary DOF split of a space.
#[derive(Clone, Debug)]
pub struct DofMap {
    pub interior: Vec<usize>,
    pub index: Vec<Option<usize>>,
}

impl DofMap {
    pub fn new(space: &ThbSpace) -> Self {
        let interior = space.interior_dofs();
        let mut index = vec![None; space.num_dofs()];
        for (k, &d) in interior.iter().enumerate() {
            index[d] = Some(k);
        }
        Self { interior, index }
    }

    /// Every DOF is an unknown.
    pub fn all(n: usize) -> Self {
        Self { interior: (0..n).collect(), index: (0..n).map(Some).collect() }
    }

    pub fn n(&self) -> usize {
        self.interior.len()
    }
}

/// A space bound to a quadrature rule, with its interior DOF numbering.
#[derive(Clone, Debug)]
pub struct Disc {
    pub space: Arc<ThbSpace>,
    pub rule: Arc<QuadRule>,
    pub table: Arc<BasisTable>,
    pub dofs: DofMap,
}

/// Default Gauss points per direction for a space of degree `p`.
pub fn default_q(p: usize) -> usize {
    p + 2
}

impl Disc {
    pub fn new(space: Arc<ThbSpace>) -> Self {
        let q = default_q(space.degree());
        Self::with_q(space, q)
    }

    pub fn with_q(space: Arc<ThbSpace>, q: usize) -> Self {
        let rule = Arc::new(QuadRule::new(&space, q));
        let table = Arc::new(BasisTable::new(&space, &rule));
        let dofs = DofMap::new(&space);
        Self { space, rule, table, dofs }
    }

    /// Another space on the same mesh, evaluated on this rule.
    pub fn sibling(&self, space: Arc<ThbSpace>) -> Self {
        let table = Arc::new(BasisTable::new(&space, &self.rule));
        let dofs = DofMap::new(&space);
        Self { space, rule: self.rule.clone(), table, dofs }
    }

    pub fn n_unknowns(&self) -> usize {
        2 * self.dofs.n()
    }

    pub fn test(&self) -> TestSpace<'_> {
        TestSpace { table: &self.table, dofs: &self.dofs }
    }

    pub fn get_interior(&self, coeffs: &[[f64; 2]]) -> Vec<f64> {
        let n = self.dofs.n();
        let mut u = vec![0.0; 2 * n];
        for (k, &d) in self.dofs.interior.iter().enumerate() {
            u[k] = coeffs[d][0];
            u[n + k] = coeffs[d][1];
        }
        u
    }

    pub fn set_interior(&self, coeffs: &mut [[f64; 2]], u: &[f64]) {
        let n = self.dofs.n();
        for (k, &d) in self.dofs.interior.iter().enumerate() {
            coeffs[d] = [u[k], u[n + k]];
        }
    }

    /// Interior coefficients as a full-length coefficient vector (boundary zero).
    pub fn field_from_unknowns(&self, u: &[f64]) -> Vec<[f64; 2]> {
        let mut c = vec![[0.0; 2]; self.space.num_dofs()];
        self.set_interior(&mut c, u);
        c
    }

    pub fn map_jet(&self, coeffs: &[[f64; 2]], k: usize) -> MapJet {
        map_jet_at(&self.table, coeffs, self.rule.cell_of_point[k], k)
    }

    pub fn map_jets(&self, coeffs: &[[f64; 2]]) -> Vec<MapJet> {
        (0..self.rule.num_points()).map(|k| self.map_jet(coeffs, k)).collect()
    }

    pub fn residual(&self, coeffs: &[[f64; 2]], prm: &EggParams, ctrl: Option<&ControlData>) -> Vec<f64> {
        residual(&self.rule, Field { table: &self.table, coeffs }, self.test(), prm, ctrl)
    }

    pub fn jacobian(&self, coeffs: &[[f64; 2]], prm: &EggParams, ctrl: Option<&ControlData>) -> CsrMatrix {
        jacobian(&self.rule, Field { table: &self.table, coeffs }, self.test(), self.test(), prm, ctrl)
    }

    pub fn gateaux_exact(&self, coeffs: &[[f64; 2]], prm: &EggParams, ctrl: Option<&ControlData>, v: &[f64]) -> Vec<f64> {
        gateaux(&self.rule, Field { table: &self.table, coeffs }, self.test(), self.test(), prm, ctrl, v)
    }

    /// One-sided difference `(F(x + e v) - F(x)) / e`.
    pub fn gateaux_fd(
        &self,
        coeffs: &[[f64; 2]],
        prm: &EggParams,
        ctrl: Option<&ControlData>,
        v: &[f64],
        eps_fd: f64,
    ) -> Result<Vec<f64>> {
        if eps_fd <= 0.0 {
            return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
        }
        let f0 = self.residual(coeffs, prm, ctrl);
        let mut c = coeffs.to_vec();
        let mut u = self.get_interior(coeffs);
        crate::linalg::axpy(&mut u, eps_fd, v);
        self.set_interior(&mut c, &u);
        let f1 = self.residual(&c, prm, ctrl);
        Ok(f1.iter().zip(&f0).map(|(a, b)| (a - b) / eps_fd).collect())
    }

    pub fn mass_matrix(&self) -> CsrMatrix {
        mass_matrix(&self.rule, self.test())
    }

    pub fn picard_system(&self, y: &[[f64; 2]], prm: &EggParams, ctrl: Option<&ControlData>) -> PicardSystem {
        picard_system(self, y, prm, ctrl)
    }
}

/// Evaluation of a coefficient field through a basis table.
#[derive(Clone, Copy)]
pub struct Field<'a> {
    pub table: &'a BasisTable,
    pub coeffs: &'a [[f64; 2]],
}

/// Test (or trial) functions: a basis table plus unknown numbering.
#[derive(Clone, Copy)]
pub struct TestSpace<'a> {
    pub table: &'a BasisTable,
    pub dofs: &'a DofMap,
}

impl TestSpace<'_> {
    fn local(&self, c: usize) -> Vec<(usize, usize)> {
        self.table.cell_dofs[c]
            .iter()
            .enumerate()
            .filter_map(|(l, &d)| self.dofs.index[d].map(|k| (l, k)))
            .collect()
    }
}

pub fn map_jet_at(table: &BasisTable, coeffs: &[[f64; 2]], c: usize, k: usize) -> MapJet {
    let pb = PointBasis { dofs: table.cell_dofs[c].clone(), jets: table.jets[k].clone() };
    MapJet::from_basis(&pb, coeffs)
}

fn ctrl_at(ctrl: Option<&ControlData>, k: usize) -> Option<(&Mat2, &Mat2, f64)> {
    ctrl.map(|c| (&c.p1[k], &c.p2[k], c.det_t[k]))
}

/// Per-cell contributions reduced in cell order.
fn reduce_vectors(n: usize, parts: Vec<Vec<(usize, f64)>>) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for part in parts {
        for (i, v) in part {
            out[i] += v;
        }
    }
    out
}

/// `F(x, sigma)` for every test unknown.
pub fn residual(rule: &QuadRule, x: Field, test: TestSpace, prm: &EggParams, ctrl: Option<&ControlData>) -> Vec<f64> {
    let nt = test.dofs.n();
    let parts = crate::par::map(rule.num_cells(), |c| {
        let tl = test.local(c);
        let mut loc = vec![0.0; 2 * tl.len()];
        for k in rule.cell_range(c) {
            let mj = map_jet_at(x.table, x.coeffs, c, k);
            let ps = PointState::new(&mj, ctrl_at(ctrl, k), prm);
            let w = rule.weights[k];
            let jets = &test.table.jets[k];
            for (a, &(l, _)) in tl.iter().enumerate() {
                let t = ps.tau(prm.tau, &jets[l]);
                loc[a] += w * t * ps.ah[0];
                loc[tl.len() + a] += w * t * ps.ah[1];
            }
        }
        let mut out = Vec::with_capacity(loc.len());
        for (a, &(_, g)) in tl.iter().enumerate() {
            out.push((g, loc[a]));
            out.push((nt + g, loc[tl.len() + a]));
        }
        out
    });
    reduce_vectors(2 * nt, parts)
}

/// Perturbation of the map at a point: `dJ` and `dH` per component.
fn perturbation(table: &BasisTable, dofs: &DofMap, v: &[f64], c: usize, k: usize) -> (Mat2, [Mat2; 2]) {
    let n = dofs.n();
    let mut dj = [[0.0; 2]; 2];
    let mut dh = [[[0.0; 2]; 2]; 2];
    for (l, &d) in table.cell_dofs[c].iter().enumerate() {
        if let Some(g) = dofs.index[d] {
            let jet = &table.jets[k][l];
            for comp in 0..2 {
                let vc = v[comp * n + g];
                if vc != 0.0 {
                    dj[comp][0] += vc * jet[1];
                    dj[comp][1] += vc * jet[2];
                    dh[comp][0][0] += vc * jet[3];
                    dh[comp][0][1] += vc * jet[4];
                    dh[comp][1][1] += vc * jet[5];
                }
            }
        }
    }
    for comp in 0..2 {
        dh[comp][1][0] = dh[comp][0][1];
    }
    (dj, dh)
}

/// Exact directional derivative `F'(x, sigma, v)` with `v` in the `dir` unknowns.
pub fn gateaux(
    rule: &QuadRule,
    x: Field,
    test: TestSpace,
    dir: TestSpace,
    prm: &EggParams,
    ctrl: Option<&ControlData>,
    v: &[f64],
) -> Vec<f64> {
    let nt = test.dofs.n();
    let parts = crate::par::map(rule.num_cells(), |c| {
        let tl = test.local(c);
        let mut loc = vec![0.0; 2 * tl.len()];
        for k in rule.cell_range(c) {
            let mj = map_jet_at(x.table, x.coeffs, c, k);
            let ps = PointState::new(&mj, ctrl_at(ctrl, k), prm);
            let (dj, dh) = perturbation(dir.table, dir.dofs, v, c, k);
            let dhtil = [
                htilde(&dh[0], dj[0], &ps.p1, &ps.p2, ps.det_t, ctrl.is_some()),
                htilde(&dh[1], dj[1], &ps.p1, &ps.p2, ps.det_t, ctrl.is_some()),
            ];
            let ds = DirState::new(&ps, &dj, &dhtil, prm.eps);
            let w = rule.weights[k];
            let jets = &test.table.jets[k];
            for (a, &(l, _)) in tl.iter().enumerate() {
                let t = ps.tau(prm.tau, &jets[l]);
                let dt = ds.dtau(prm.tau, &jets[l]);
                for comp in 0..2 {
                    loc[comp * tl.len() + a] += w * (dt * ps.ah[comp] + t * ds.dah[comp]);
                }
            }
        }
        let mut out = Vec::with_capacity(loc.len());
        for (a, &(_, g)) in tl.iter().enumerate() {
            out.push((g, loc[a]));
            out.push((nt + g, loc[tl.len() + a]));
        }
        out
    });
    reduce_vectors(2 * nt, parts)
}

/// Local element matrix plus its global row and column numbers.
pub struct LocalMatrix {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

fn assemble(n_rows: usize, n_cols: usize, parts: Vec<LocalMatrix>) -> CsrMatrix {
    let mut trip = Vec::with_capacity(parts.iter().map(|p| p.vals.len()).sum());
    for p in parts {
        let nc = p.cols.len();
        for (i, &r) in p.rows.iter().enumerate() {
            for (j, &c) in p.cols.iter().enumerate() {
                let v = p.vals[i * nc + j];
                if v != 0.0 {
                    trip.push((r, c, v));
                }
            }
        }
    }
    CsrMatrix::from_triplets(n_rows, n_cols, &trip)
}

/// Element matrices of the Gateaux linearization.
pub fn jacobian_local(
    rule: &QuadRule,
    x: Field,
    test: TestSpace,
    dir: TestSpace,
    prm: &EggParams,
    ctrl: Option<&ControlData>,
    c: usize,
) -> LocalMatrix {
    let (nt, nd) = (test.dofs.n(), dir.dofs.n());
    let tl = test.local(c);
    let dl = dir.local(c);
    let (mt, md) = (tl.len(), dl.len());
    let ncol = 2 * md;
    let mut vals = vec![0.0; 2 * mt * ncol];
    let mut tvals = vec![0.0; mt];
    for k in rule.cell_range(c) {
        let mj = map_jet_at(x.table, x.coeffs, c, k);
        let ps = PointState::new(&mj, ctrl_at(ctrl, k), prm);
        let w = rule.weights[k];
        let tj = &test.table.jets[k];
        let dj_all = &dir.table.jets[k];
        for (a, &(l, _)) in tl.iter().enumerate() {
            tvals[a] = ps.tau(prm.tau, &tj[l]);
        }
        for (b, &(l, _)) in dl.iter().enumerate() {
            let jet = &dj_all[l];
            let hb = ps.htil_of(jet);
            let hb = if ctrl.is_some() { hb } else { jet_hessian(jet) };
            for d in 0..2 {
                let mut djac = [[0.0; 2]; 2];
                djac[d] = [jet[1], jet[2]];
                let mut dhtil = [[[0.0; 2]; 2]; 2];
                dhtil[d] = hb;
                let ds = DirState::new(&ps, &djac, &dhtil, prm.eps);
                let col = d * md + b;
                for (a, &(l, _)) in tl.iter().enumerate() {
                    let dt = ds.dtau(prm.tau, &tj[l]);
                    for comp in 0..2 {
                        vals[(comp * mt + a) * ncol + col] += w * (dt * ps.ah[comp] + tvals[a] * ds.dah[comp]);
                    }
                }
            }
        }
    }
    let rows = (0..2).flat_map(|comp| tl.iter().map(move |&(_, g)| comp * nt + g)).collect();
    let cols = (0..2).flat_map(|comp| dl.iter().map(move |&(_, g)| comp * nd + g)).collect();
    LocalMatrix { rows, cols, vals }
}

/// Assembled Gateaux linearization: rows = test unknowns, columns = `dir` unknowns.
pub fn jacobian(
    rule: &QuadRule,
    x: Field,
    test: TestSpace,
    dir: TestSpace,
    prm: &EggParams,
    ctrl: Option<&ControlData>,
) -> CsrMatrix {
    let parts = crate::par::map(rule.num_cells(), |c| jacobian_local(rule, x, test, dir, prm, ctrl, c));
    assemble(2 * test.dofs.n(), 2 * dir.dofs.n(), parts)
}

pub fn mass_matrix(rule: &QuadRule, test: TestSpace) -> CsrMatrix {
    let parts = crate::par::map(rule.num_cells(), |c| {
        let tl = test.local(c);
        let m = tl.len();
        let mut vals = vec![0.0; m * m];
        for k in rule.cell_range(c) {
            let w = rule.weights[k];
            let jets = &test.table.jets[k];
            for (a, &(la, _)) in tl.iter().enumerate() {
                for (b, &(lb, _)) in tl.iter().enumerate() {
                    vals[a * m + b] += w * jets[la][0] * jets[lb][0];
                }
            }
        }
        let idx: Vec<usize> = tl.iter().map(|&(_, g)| g).collect();
        LocalMatrix { rows: idx.clone(), cols: idx, vals }
    });
    let n = test.dofs.n();
    assemble(n, n, parts)
}

/// Scalar block and right-hand sides of the Picard step (identical block per component).
pub struct PicardSystem {
    pub matrix: CsrMatrix,
    pub rhs: [Vec<f64>; 2],
}

impl PicardSystem {
    /// The full two-component matrix (block diagonal).
    pub fn block_matrix(&self) -> CsrMatrix {
        let n = self.matrix.n_rows;
        let mut t = self.matrix.triplets();
        t.extend(self.matrix.triplets().into_iter().map(|(r, c, v)| (r + n, c + n, v)));
        CsrMatrix::from_triplets(2 * n, 2 * n, &t)
    }

    /// Solve both components; returns the unknown vector.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let lu = SparseLu::new(&self.matrix)?;
        let mut u = lu.solve(&self.rhs[0])?;
        u.extend(lu.solve(&self.rhs[1])?);
        Ok(u)
    }
}

/// Linear system for `x^{k+1}` given the frozen iterate `y = x^k`.
pub fn picard_system(disc: &Disc, y: &[[f64; 2]], prm: &EggParams, ctrl: Option<&ControlData>) -> PicardSystem {
    let rule = &disc.rule;
    let test = disc.test();
    let n = disc.dofs.n();
    let mut lift = y.to_vec();
    for &d in &disc.dofs.interior {
        lift[d] = [0.0, 0.0];
    }
    let parts = crate::par::map(rule.num_cells(), |c| {
        let tl = test.local(c);
        let m = tl.len();
        let mut vals = vec![0.0; m * m];
        let mut rhs = vec![0.0; 2 * m];
        let dofs = &disc.table.cell_dofs[c];
        for k in rule.cell_range(c) {
            let my = map_jet_at(&disc.table, y, c, k);
            let ps = PointState::new(&my, ctrl_at(ctrl, k), prm);
            let w = rule.weights[k];
            let jets = &disc.table.jets[k];
            let ml = map_jet_at(&disc.table, &lift, c, k);
            let mut f = [0.0; 2];
            for comp in 0..2 {
                let hl = htilde(&ml.hess[comp], ml.jac[comp], &ps.p1, &ps.p2, ps.det_t, ctrl.is_some());
                let lap_y = ps.htil[comp][0][0] + ps.htil[comp][1][1];
                f[comp] = ddot(&ps.a_mu, &hl) - prm.mu * lap_y;
            }
            for (a, &(la, _)) in tl.iter().enumerate() {
                let t = ps.tau(prm.tau, &jets[la]);
                for (b, &(lb, _)) in tl.iter().enumerate() {
                    let hb = htilde(
                        &jet_hessian(&jets[lb]),
                        [jets[lb][1], jets[lb][2]],
                        &ps.p1,
                        &ps.p2,
                        ps.det_t,
                        ctrl.is_some(),
                    );
                    vals[a * m + b] += w * t * ddot(&ps.a_mu, &hb);
                }
                rhs[a] -= w * t * f[0];
                rhs[m + a] -= w * t * f[1];
            }
        }
        let _ = dofs;
        let idx: Vec<usize> = tl.iter().map(|&(_, g)| g).collect();
        (LocalMatrix { rows: idx.clone(), cols: idx, vals }, rhs)
    });
    let mut mats = Vec::with_capacity(parts.len());
    let mut rhs = [vec![0.0; n], vec![0.0; n]];
    for (lm, r) in parts {
        let m = lm.rows.len();
        for (a, &g) in lm.rows.iter().enumerate() {
            rhs[0][g] += r[a];
            rhs[1][g] += r[m + a];
        }
        mats.push(lm);
    }
    PicardSystem { matrix: assemble(n, n, mats), rhs }
}

/// Minimum Jacobian determinant over the rule and its location.
pub fn min_det(disc: &Disc, coeffs: &[[f64; 2]]) -> (f64, usize) {
    let dets = crate::par::map(disc.rule.num_points(), |k| disc.map_jet(coeffs, k).det());
    dets.iter().enumerate().fold((f64::INFINITY, 0), |(m, i), (k, &d)| if d < m { (d, k) } else { (m, i) })
}

fn check_bijective(disc: &Disc, mjs: &[MapJet]) -> Result<()> {
    for (k, mj) in mjs.iter().enumerate() {
        if mj.det() <= 0.0 {
            let p = disc.rule.points[k];
            return Err(Error::NotBijective(format!(
                "det J = {:e} at quadrature point {k} (xi = {}, eta = {})",
                mj.det(),
                p[0],
                p[1]
            )));
        }
    }
    Ok(())
}

/// Winslow functional `int (g11 + g22) / det J`.
pub fn winslow_value(disc: &Disc, coeffs: &[[f64; 2]]) -> Result<f64> {
    let mjs = disc.map_jets(coeffs);
    check_bijective(disc, &mjs)?;
    Ok(mjs
        .iter()
        .zip(&disc.rule.weights)
        .map(|(mj, w)| {
            let (g11, _, g22) = metric(&mj.jac);
            w * (g11 + g22) / mj.det()
        })
        .sum())
}

/// Winslow value and its gradient with respect to the interior unknowns.
pub fn winslow_value_and_gradient(disc: &Disc, coeffs: &[[f64; 2]]) -> Result<(f64, Vec<f64>)> {
    let value = winslow_value(disc, coeffs)?;
    let rule = &disc.rule;
    let test = disc.test();
    let n = disc.dofs.n();
    let parts = crate::par::map(rule.num_cells(), |c| {
        let tl = test.local(c);
        let mut out = Vec::with_capacity(2 * tl.len());
        let mut loc = vec![0.0; 2 * tl.len()];
        for k in rule.cell_range(c) {
            let mj = disc.map_jet(coeffs, k);
            let j = mj.jac;
            let d = det2(&j);
            let s = ddot(&j, &j);
            let cof = cofactor(&j);
            let w = rule.weights[k];
            for (a, &(l, _)) in tl.iter().enumerate() {
                let jet = &disc.table.jets[k][l];
                for comp in 0..2 {
                    let je = j[comp][0] * jet[1] + j[comp][1] * jet[2];
                    let ce = cof[comp][0] * jet[1] + cof[comp][1] * jet[2];
                    loc[comp * tl.len() + a] += w * (2.0 * je / d - s * ce / (d * d));
                }
            }
        }
        for (a, &(_, g)) in tl.iter().enumerate() {
            out.push((g, loc[a]));
            out.push((n + g, loc[tl.len() + a]));
        }
        out
    });
    Ok((value, reduce_vectors(2 * n, parts)))
}

/// Hessian of the Winslow functional with respect to the interior unknowns.
pub fn winslow_hessian(disc: &Disc, coeffs: &[[f64; 2]]) -> CsrMatrix {
    let rule = &disc.rule;
    let test = disc.test();
    let n = disc.dofs.n();
    let parts = crate::par::map(rule.num_cells(), |c| {
        let tl = test.local(c);
        let m = tl.len();
        let mut vals = vec![0.0; 4 * m * m];
        for k in rule.cell_range(c) {
            let mj = disc.map_jet(coeffs, k);
            let j = mj.jac;
            let d = det2(&j);
            let s = ddot(&j, &j);
            let cof = cofactor(&j);
            let w = rule.weights[k];
            let dirs: Vec<Mat2> = (0..2)
                .flat_map(|comp| {
                    tl.iter().map(move |&(l, _)| {
                        let jet = &disc.table.jets[k][l];
                        let mut e = [[0.0; 2]; 2];
                        e[comp] = [jet[1], jet[2]];
                        e
                    })
                })
                .collect();
            let je: Vec<f64> = dirs.iter().map(|e| ddot(&j, e)).collect();
            let ce: Vec<f64> = dirs.iter().map(|e| ddot(&cof, e)).collect();
            for (p, e) in dirs.iter().enumerate() {
                for (q, f) in dirs.iter().enumerate() {
                    let d2 = e[0][0] * f[1][1] + e[1][1] * f[0][0] - e[0][1] * f[1][0] - e[1][0] * f[0][1];
                    let h = 2.0 * ddot(e, f) / d - 2.0 * je[p] * ce[q] / (d * d) - 2.0 * je[q] * ce[p] / (d * d)
                        - s * d2 / (d * d)
                        + 2.0 * s * ce[p] * ce[q] / (d * d * d);
                    vals[p * 2 * m + q] += w * h;
                }
            }
        }
        let idx: Vec<usize> =
            (0..2).flat_map(|comp| tl.iter().map(move |&(_, g)| comp * n + g)).collect();
        LocalMatrix { rows: idx.clone(), cols: idx, vals }
    });
    assemble(2 * n, 2 * n, parts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    All,
    /// Interior DOFs only; boundary coefficients taken from `fixed` (or zero).
    Interior,
}

/// Galerkin L2 projection of pointwise values given at every rule point.
pub fn l2_project_values(
    disc: &Disc,
    vals: &[[f64; 2]],
    subset: Subset,
    fixed: Option<&[[f64; 2]]>,
) -> Result<Vec<[f64; 2]>> {
    let ndof = disc.space.num_dofs();
    let dofs = match subset {
        Subset::All => DofMap::all(ndof),
        Subset::Interior => disc.dofs.clone(),
    };
    let test = TestSpace { table: &disc.table, dofs: &dofs };
    let mass = mass_matrix(&disc.rule, test);
    let n = dofs.n();
    let mut base = vec![[0.0; 2]; ndof];
    if let (Subset::Interior, Some(f)) = (subset, fixed) {
        for d in 0..ndof {
            if dofs.index[d].is_none() {
                base[d] = f[d];
            }
        }
    }
    let mut rhs = [vec![0.0; n], vec![0.0; n]];
    for c in 0..disc.rule.num_cells() {
        for k in disc.rule.cell_range(c) {
            let w = disc.rule.weights[k];
            let mb = map_jet_at(&disc.table, &base, c, k);
            for (l, &d) in disc.table.cell_dofs[c].iter().enumerate() {
                if let Some(g) = dofs.index[d] {
                    let nv = disc.table.jets[k][l][0];
                    for comp in 0..2 {
                        rhs[comp][g] += w * nv * (vals[k][comp] - mb.x[comp]);
                    }
                }
            }
        }
    }
    let lu = SparseLu::new(&mass)?;
    let cx = lu.solve(&rhs[0])?;
    let cy = lu.solve(&rhs[1])?;
    let mut out = base;
    for (k, &d) in dofs.interior.iter().enumerate() {
        out[d] = [cx[k], cy[k]];
    }
    Ok(out)
}

/// L2 projection of a function of the parametric coordinates.
pub fn l2_project<F>(disc: &Disc, f: F, subset: Subset, fixed: Option<&[[f64; 2]]>) -> Result<Vec<[f64; 2]>>
where
    F: Fn(f64, f64) -> [f64; 2],
{
    let vals: Vec<[f64; 2]> = disc.rule.points.iter().map(|p| f(p[0], p[1])).collect();
    l2_project_values(disc, &vals, subset, fixed)
}

/// Boundary coefficients from the L2 projection of the boundary curves onto
/// the trace space; interior coefficients are zero. Also returns the L2
/// fit error of every boundary cell edge as `(cell, side, error)`.
pub fn trace_project(
    space: &ThbSpace,
    curves: &dyn BoundaryCurves,
) -> Result<(Vec<[f64; 2]>, Vec<(usize, Side, f64)>)> {
    let p = space.degree();
    let (gx, gw) = gauss_legendre(p + 4);
    let bdofs = space.boundary_dofs();
    let mut bidx = vec![usize::MAX; space.num_dofs()];
    for (k, &d) in bdofs.iter().enumerate() {
        bidx[d] = k;
    }
    let nb = bdofs.len();
    let edges = boundary_edges(space);
    let mut trip = Vec::new();
    let mut rhs = [vec![0.0; nb], vec![0.0; nb]];
    let mut samples = Vec::with_capacity(edges.len());
    for &(c, side, t0, t1) in &edges {
        let mut pts = Vec::with_capacity(gx.len());
        for (x, w) in gx.iter().zip(&gw) {
            let t = t0 + (t1 - t0) * x;
            let wt = w * (t1 - t0);
            let [xi, eta] = side.point(t);
            let pb = space.eval_in_cell(c, xi, eta);
            let g = curves.eval(side, t);
            let loc: Vec<(usize, f64)> = pb
                .dofs
                .iter()
                .zip(&pb.jets)
                .filter(|(d, j)| bidx[**d] != usize::MAX && j[0] != 0.0)
                .map(|(d, j)| (bidx[*d], j[0]))
                .collect();
            for &(a, va) in &loc {
                for &(b, vb) in &loc {
                    trip.push((a, b, wt * va * vb));
                }
                rhs[0][a] += wt * va * g[0];
                rhs[1][a] += wt * va * g[1];
            }
            pts.push((wt, g, loc));
        }
        samples.push(pts);
    }
    let mass = CsrMatrix::from_triplets(nb, nb, &trip);
    let lu = SparseLu::new(&mass)?;
    let cx = lu.solve(&rhs[0])?;
    let cy = lu.solve(&rhs[1])?;
    let mut coeffs = vec![[0.0; 2]; space.num_dofs()];
    for (k, &d) in bdofs.iter().enumerate() {
        coeffs[d] = [cx[k], cy[k]];
    }
    let errors = edges
        .iter()
        .zip(&samples)
        .map(|(&(c, side, _, _), pts)| {
            let e2: f64 = pts
                .iter()
                .map(|(wt, g, loc)| {
                    let mut v = [0.0; 2];
                    for &(a, va) in loc {
                        v[0] += va * cx[a];
                        v[1] += va * cy[a];
                    }
                    wt * ((v[0] - g[0]).powi(2) + (v[1] - g[1]).powi(2))
                })
                .sum();
            (c, side, e2.sqrt())
        })
        .collect();
    Ok((coeffs, errors))
}

/// Boundary edges of active cells as `(cell, side, t0, t1)`.
pub fn boundary_edges(space: &ThbSpace) -> Vec<(usize, Side, f64, f64)> {
    let mut out = Vec::new();
    for (c, cell) in space.cells().iter().enumerate() {
        let n = space.mesh().n(cell.level);
        let [x0, x1, y0, y1] = cell.bounds;
        if cell.j == 0 {
            out.push((c, Side::South, x0, x1));
        }
        if cell.i + 1 == n {
            out.push((c, Side::East, y0, y1));
        }
        if cell.j + 1 == n {
            out.push((c, Side::North, x0, x1));
        }
        if cell.i == 0 {
            out.push((c, Side::West, y0, y1));
        }
    }
    out
}

/// Transfinite (Coons) interpolation of four boundary curves.
pub fn coons_point(b: &dyn BoundaryCurves, xi: f64, eta: f64) -> [f64; 2] {
    let s = b.eval(Side::South, xi);
    let n = b.eval(Side::North, xi);
    let w = b.eval(Side::West, eta);
    let e = b.eval(Side::East, eta);
    let s0 = b.eval(Side::South, 0.0);
    let s1 = b.eval(Side::South, 1.0);
    let n0 = b.eval(Side::North, 0.0);
    let n1 = b.eval(Side::North, 1.0);
    let mut out = [0.0; 2];
    for i in 0..2 {
        out[i] = (1.0 - xi) * w[i] + xi * e[i] + (1.0 - eta) * s[i] + eta * n[i]
            - ((1.0 - xi) * (1.0 - eta) * s0[i] + xi * (1.0 - eta) * s1[i] + (1.0 - xi) * eta * n0[i] + xi * eta * n1[i]);
    }
    out
}

/// Map with trace-projected boundary and the L2-projected Coons patch inside.
pub fn coons_patch(disc: &Disc, b: &dyn BoundaryCurves) -> Result<GeometryMap> {
    let (bc, _) = trace_project(&disc.space, b)?;
    let coeffs = l2_project(disc, |xi, eta| coons_point(b, xi, eta), Subset::Interior, Some(&bc))?;
    GeometryMap::new(disc.space.clone(), coeffs)
}

/// Refine cells touching the boundary until every boundary edge is fitted
/// to `fit_tol` in L2 by the trace space.
pub fn build_initial_space(
    degree: usize,
    regularity: usize,
    n0: usize,
    boundary: &dyn BoundaryCurves,
    fit_tol: f64,
    max_levels: usize,
) -> Result<ThbSpace> {
    if fit_tol <= 0.0 {
        return Err(Error::InvalidArgument("fit_tol must be positive".into()));
    }
    let mesh = crate::thb::HierarchicalMesh::with_max_levels(n0, max_levels)?;
    let mut space = ThbSpace::new(degree, regularity, mesh)?;
    loop {
        let (_, errs) = trace_project(&space, boundary)?;
        let mut bad: Vec<(usize, usize, usize)> = errs
            .iter()
            .filter(|e| e.2 > fit_tol)
            .map(|e| {
                let c = &space.cells()[e.0];
                (c.level, c.i, c.j)
            })
            .collect();
        if bad.is_empty() {
            return Ok(space);
        }
        bad.dedup();
        let worst = errs.iter().map(|e| e.2).fold(0.0, f64::max);
        let (next, info) = space.refine_cells(&bad)?;
        if info.noop || info.skipped_at_cap > 0 {
            return Err(Error::NotConverged(format!(
                "boundary fit error {worst:e} above {fit_tol:e} at the level cap ({max_levels} levels)"
            )));
        }
        space = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{AnnulusSector, BoundaryData};

    fn disc(n: usize) -> Disc {
        Disc::new(Arc::new(ThbSpace::uniform(3, 2, n).unwrap()))
    }

    #[test]
    fn initial_space_refines_only_where_needed() {
        let b = BoundaryData::quad([0.0, 0.0], [1.0, 0.0], [1.2, 1.0], [0.0, 1.0]);
        let s = build_initial_space(3, 2, 4, &b, 1e-10, 8).unwrap();
        assert_eq!(s.num_dofs(), 49);
        let bump = |side: Side, t: f64| -> [f64; 2] {
            let p = side.point(t);
            let y = if side == Side::South { 0.05 * (-((t - 0.3) / 0.02).powi(2)).exp() } else { p[1] };
            [p[0], y]
        };
        struct F<G>(G);
        impl<G: Fn(Side, f64) -> [f64; 2] + Sync + Send> BoundaryCurves for F<G> {
            fn eval(&self, side: Side, t: f64) -> [f64; 2] {
                (self.0)(side, t)
            }
        }
        let s = build_initial_space(3, 2, 4, &F(bump), 1e-5, 8).unwrap();
        assert!(s.mesh().num_levels() > 1);
        let top = s.mesh().num_levels() - 1;
        for c in s.cells().iter().filter(|c| c.level == top) {
            assert!(c.bounds[2] < 0.05 && (c.bounds[0] - 0.3).abs() < 0.2, "{:?}", c.bounds);
        }
        assert!(build_initial_space(3, 2, 4, &F(bump), 1e-14, 3).is_err());
    }

    #[test]
    fn a_matrix_identity_and_scaling() {
        let i = [[1.0, 0.0], [0.0, 1.0]];
        let a = a_matrix(&i, 1e-4);
        assert!((a[0][0] - 1.0 / 2.0001).abs() < 1e-15 && a[0][1] == 0.0);
        let c = [[3.0, 0.0], [0.0, 3.0]];
        let a = a_matrix(&c, 0.0);
        assert_eq!(a, [[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn gamma_of_scaled_identity() {
        let c = 0.7;
        assert!((gamma(&[[c, 0.0], [0.0, c]]) - 1.0 / c).abs() < 1e-14);
    }

    #[test]
    fn identity_residual_vanishes() {
        let d = disc(4);
        let x = GeometryMap::identity(d.space.clone());
        for tau in [Tau::Id, Tau::Div, Tau::Ls] {
            let r = d.residual(&x.coeffs, &EggParams { tau, mu: 0.0, eps: 1e-4 }, None);
            assert!(r.iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn coons_of_square_is_identity() {
        let d = disc(3);
        let b = BoundaryData::quad([0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]);
        let x = coons_patch(&d, &b).unwrap();
        let id = d.space.identity_coeffs();
        for (a, b) in x.coeffs.iter().zip(&id) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn gateaux_matches_jacobian_and_fd() {
        let d = disc(4);
        let x = coons_patch(&d, &AnnulusSector).unwrap();
        for tau in [Tau::Id, Tau::Div, Tau::Ls] {
            let prm = EggParams { tau, mu: 0.0, eps: 1e-4 };
            let v: Vec<f64> = (0..d.n_unknowns()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let g = d.gateaux_exact(&x.coeffs, &prm, None, &v);
            let jv = d.jacobian(&x.coeffs, &prm, None).matvec(&v);
            let fd = d.gateaux_fd(&x.coeffs, &prm, None, &v, 1e-7 * (1.0 + x.max_abs())).unwrap();
            let ng = crate::linalg::norm2(&g);
            let e1: f64 = g.iter().zip(&jv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let e2: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(e1 <= 1e-12 * ng, "{tau:?} {e1}");
            assert!(e2 <= 1e-5 * ng, "{tau:?} {e2} {ng}");
        }
    }

    #[test]
    fn winslow_identity_and_stretch() {
        let d = disc(3);
        let id = GeometryMap::identity(d.space.clone());
        let (v, g) = winslow_value_and_gradient(&d, &id.coeffs).unwrap();
        assert!((v - 2.0).abs() < 1e-13);
        assert!(g.iter().all(|x| x.abs() < 1e-13));
        let st: Vec<[f64; 2]> = id.coeffs.iter().map(|c| [2.0 * c[0], c[1]]).collect();
        assert!((winslow_value(&d, &st).unwrap() - 2.5).abs() < 1e-13);
    }

    #[test]
    fn winslow_hessian_matches_gradient_fd() {
        let d = disc(3);
        let x = coons_patch(&d, &AnnulusSector).unwrap();
        let h = winslow_hessian(&d, &x.coeffs);
        let v: Vec<f64> = (0..d.n_unknowns()).map(|i| ((i * 13 % 7) as f64 - 3.0) * 1e-2).collect();
        let hv = h.matvec(&v);
        let e = 1e-6;
        let mut cp = x.coeffs.clone();
        let mut cm = x.coeffs.clone();
        let u = d.get_interior(&x.coeffs);
        let up: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + e * b).collect();
        let um: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - e * b).collect();
        d.set_interior(&mut cp, &up);
        d.set_interior(&mut cm, &um);
        let gp = winslow_value_and_gradient(&d, &cp).unwrap().1;
        let gm = winslow_value_and_gradient(&d, &cm).unwrap().1;
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * e)).collect();
        let err: f64 = fd.iter().zip(&hv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-6 * crate::linalg::norm2(&hv));
    }

    #[test]
    fn projection_properties() {
        let d = disc(3);
        let c = l2_project(&d, |_, _| [2.5, -1.0], Subset::All, None).unwrap();
        assert!(c.iter().all(|v| (v[0] - 2.5).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12));
        let f = |x: f64, y: f64| [(3.0 * x).sin() * y.exp(), x * y];
        let c = l2_project(&d, f, Subset::All, None).unwrap();
        let mjs = d.map_jets(&c);
        let mut res = vec![0.0; d.space.num_dofs()];
        for cidx in 0..d.rule.num_cells() {
            for k in d.rule.cell_range(cidx) {
                let [x, y] = d.rule.points[k];
                let r = f(x, y)[0] - mjs[k].x[0];
                for (l, &dof) in d.table.cell_dofs[cidx].iter().enumerate() {
                    res[dof] += d.rule.weights[k] * r * d.table.jets[k][l][0];
                }
            }
        }
        assert!(res.iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn picard_block_and_fixed_point() {
        let d = disc(3);
        let id = GeometryMap::identity(d.space.clone());
        let prm = EggParams { tau: Tau::Id, mu: 1e-2, eps: 1e-4 };
        let sys = d.picard_system(&id.coeffs, &prm, None);
        let u = sys.solve().unwrap();
        let u0 = d.get_interior(&id.coeffs);
        assert!(u.iter().zip(&u0).all(|(a, b)| (a - b).abs() < 1e-10));
        let blk = sys.block_matrix();
        let n = sys.matrix.n_rows;
        for (r, c, _) in blk.triplets() {
            assert_eq!(r < n, c < n);
        }
    }
}
