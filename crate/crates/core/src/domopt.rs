//! Control maps of the unit square: reparameterized recomputation,
//! diffusion-based control maps, constrained domain optimization and
//! direct geometry optimization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assembly::{self, cofactor, det2, ControlData, Disc, DofMap, Mat2, Subset, TestSpace};
use crate::boundary::{BoundaryCurves, Side};
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, SparseLu};
use crate::optim::{self, ConstraintEval, OptimConfig, OptimReport, Problem};
use crate::quadrature::{gauss_legendre, BasisTable, QuadRule};
use crate::quality::{point_derivative, Functional};
use crate::solvers::{self, SolveReport, SolverConfig};
use crate::thb::{GeometryMap, MapJet, ThbSpace};

/// Map jets of `map` at every rule point of `disc`.
pub fn jets_on(map: &GeometryMap, disc: &Disc) -> Result<Vec<MapJet>> {
    if Arc::ptr_eq(&map.space, &disc.space) {
        return Ok(disc.map_jets(&map.coeffs));
    }
    crate::par::map(disc.rule.num_points(), |k| {
        let [a, b] = disc.rule.points[k];
        map.eval(a, b)
    })
    .into_iter()
    .collect()
}

fn inverse(t: &Mat2) -> Mat2 {
    let d = det2(t);
    [[t[1][1] / d, -t[0][1] / d], [-t[1][0] / d, t[0][0] / d]]
}

fn matmul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Boundary curves given by a closure.
pub struct FnCurves<F>(pub F);

impl<F: Fn(Side, f64) -> [f64; 2] + Sync + Send> BoundaryCurves for FnCurves<F> {
    fn eval(&self, side: Side, t: f64) -> [f64; 2] {
        (self.0)(side, t)
    }
}

/// A map `s` of the unit square onto itself.
#[derive(Clone, Debug)]
pub struct ControlMap {
    pub map: GeometryMap,
}

impl ControlMap {
    pub fn identity(space: Arc<ThbSpace>) -> Self {
        Self { map: GeometryMap::identity(space) }
    }

    pub fn space(&self) -> &Arc<ThbSpace> {
        &self.map.space
    }

    /// `s(xi, eta)` with the argument clamped to the unit square.
    pub fn eval(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let q = self.map.eval(p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0))?.x;
        Ok([q[0].clamp(0.0, 1.0), q[1].clamp(0.0, 1.0)])
    }

    /// `T`, `det T` and the control matrices at the rule points of `disc`.
    pub fn control_data(&self, disc: &Disc) -> Result<ControlData> {
        control_matrices_from_jets(&jets_on(&self.map, disc)?, &disc.rule.points)
    }

    /// Smallest `det T` over the rule points of `disc`.
    pub fn min_det(&self, disc: &Disc) -> Result<f64> {
        Ok(jets_on(&self.map, disc)?.iter().map(|j| j.det()).fold(f64::INFINITY, f64::min))
    }

    /// Largest coefficient distance to the identity on the boundary.
    pub fn trace_deviation(&self) -> f64 {
        let id = self.map.space.identity_coeffs();
        self.map
            .space
            .boundary_dofs()
            .iter()
            .map(|&d| (self.map.coeffs[d][0] - id[d][0]).abs().max((self.map.coeffs[d][1] - id[d][1]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Control matrices `P^k_ij = (-T^-1 d^2 s / d xi_i d xi_j)_k` at `pts`.
pub fn control_matrices(s: &GeometryMap, pts: &[[f64; 2]]) -> Result<ControlData> {
    let jets = pts.iter().map(|p| s.eval(p[0], p[1])).collect::<Result<Vec<_>>>()?;
    control_matrices_from_jets(&jets, pts)
}

fn control_matrices_from_jets(jets: &[MapJet], pts: &[[f64; 2]]) -> Result<ControlData> {
    let n = jets.len();
    let mut cd = ControlData { t: Vec::with_capacity(n), det_t: Vec::with_capacity(n), p1: Vec::new(), p2: Vec::new() };
    for (k, j) in jets.iter().enumerate() {
        let t = j.jac;
        let d = det2(&t);
        let scale = t.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        if d.abs() <= 1e-12 * scale * scale {
            return Err(Error::Singular(format!(
                "control map Jacobian is singular at ({}, {})",
                pts[k][0], pts[k][1]
            )));
        }
        let ti = inverse(&t);
        let mut p = [[[0.0; 2]; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let h = [j.hess[0][a][b], j.hess[1][a][b]];
                for (kk, pk) in p.iter_mut().enumerate() {
                    pk[a][b] = -(ti[kk][0] * h[0] + ti[kk][1] * h[1]);
                }
            }
        }
        cd.t.push(t);
        cd.det_t.push(d);
        cd.p1.push(p[0]);
        cd.p2.push(p[1]);
    }
    Ok(cd)
}

fn fold_scan(s: &ControlMap, disc: &Disc, advice: &str) -> Result<()> {
    let m = s.min_det(disc)?;
    if !(m > 0.0) {
        return Err(Error::NotBijective(format!("control map folds (min det T = {m:e}); {advice}")));
    }
    Ok(())
}

/// Solve `div(D grad u_c) = 0` for both components, with the DOFs outside
/// `dofs` fixed to `values`.
fn diffusion_solve(disc: &Disc, diff: &[Mat2], dofs: &DofMap, values: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let n = dofs.n();
    let parts = crate::par::map(disc.rule.num_cells(), |c| {
        let cd = &disc.table.cell_dofs[c];
        let m = cd.len();
        let mut k_loc = vec![0.0; m * m];
        for k in disc.rule.cell_range(c) {
            let w = disc.rule.weights[k];
            let d = &diff[k];
            let jets = &disc.table.jets[k];
            for a in 0..m {
                let ga = [jets[a][1], jets[a][2]];
                let dga = [d[0][0] * ga[0] + d[0][1] * ga[1], d[1][0] * ga[0] + d[1][1] * ga[1]];
                for b in 0..m {
                    k_loc[a * m + b] += w * (dga[0] * jets[b][1] + dga[1] * jets[b][2]);
                }
            }
        }
        let mut trip = Vec::new();
        let mut rhs = Vec::new();
        for a in 0..m {
            let Some(ia) = dofs.index[cd[a]] else { continue };
            for b in 0..m {
                let v = k_loc[a * m + b];
                match dofs.index[cd[b]] {
                    Some(ib) => trip.push((ia, ib, v)),
                    None => rhs.push((ia, [-v * values[cd[b]][0], -v * values[cd[b]][1]])),
                }
            }
        }
        (trip, rhs)
    });
    let mut trip = Vec::new();
    let mut rhs = [vec![0.0; n], vec![0.0; n]];
    for (t, r) in parts {
        trip.extend(t);
        for (i, v) in r {
            rhs[0][i] += v[0];
            rhs[1][i] += v[1];
        }
    }
    let lu = SparseLu::new(&CsrMatrix::from_triplets(n, n, &trip))?;
    let sx = lu.solve(&rhs[0])?;
    let sy = lu.solve(&rhs[1])?;
    let mut out = values.to_vec();
    for (k, &d) in dofs.interior.iter().enumerate() {
        out[d] = [sx[k], sy[k]];
    }
    Ok(out)
}

/// Diffusion control map with `D = (det dx*/dxi)^k I` and identity trace.
pub fn maxprinciple_reparam(x_star: &GeometryMap, k: f64, space_s: Arc<ThbSpace>) -> Result<ControlMap> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::InvalidArgument(format!("exponent k must be >= 0, got {k}")));
    }
    let id = ControlMap::identity(space_s.clone());
    if k == 0.0 {
        return Ok(id);
    }
    let disc = Disc::new(space_s);
    let jets = jets_on(x_star, &disc)?;
    let mut diff = Vec::with_capacity(jets.len());
    for (j, p) in jets.iter().zip(&disc.rule.points) {
        let d = j.det();
        if !(d > 0.0) {
            return Err(Error::NotBijective(format!("base map has det J = {d:e} at ({}, {})", p[0], p[1])));
        }
        let w = d.powf(k);
        diff.push([[w, 0.0], [0.0, w]]);
    }
    let coeffs = diffusion_solve(&disc, &diff, &disc.dofs, &id.map.coeffs)?;
    let s = ControlMap { map: GeometryMap::new(disc.space.clone(), coeffs)? };
    fold_scan(&s, &disc, "reduce k")?;
    Ok(s)
}

/// Anisotropic diffusion post-processing of a control map: minimizes
/// `int (det d_s x)^k (g11 + beta g22) det T` over maps with the trace of `s`.
pub fn sprime_postprocess(s: &ControlMap, x_h: &GeometryMap, k: f64, beta: f64) -> Result<ControlMap> {
    if !(k >= 0.0) || !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("need k >= 0 and beta > 0, got k = {k}, beta = {beta}")));
    }
    let disc = Disc::new(s.space().clone());
    let sj = disc.map_jets(&s.map.coeffs);
    let xj = jets_on(x_h, &disc)?;
    let mut diff = Vec::with_capacity(sj.len());
    for ((a, b), p) in sj.iter().zip(&xj).zip(&disc.rule.points) {
        let (dt, dx) = (a.det(), b.det());
        if !(dt > 0.0) || !(dx > 0.0) {
            return Err(Error::NotBijective(format!(
                "det T = {dt:e}, det J = {dx:e} at ({}, {})",
                p[0], p[1]
            )));
        }
        let w = (dx / dt).powf(k) * dt;
        let ti = inverse(&a.jac);
        let m = matmul(&matmul(&ti, &[[1.0, 0.0], [0.0, beta]]), &transpose(&ti));
        diff.push([[w * m[0][0], w * m[0][1]], [w * m[1][0], w * m[1][1]]]);
    }
    let coeffs = diffusion_solve(&disc, &diff, &disc.dofs, &s.map.coeffs)?;
    let out = ControlMap { map: GeometryMap::new(disc.space.clone(), coeffs)? };
    fold_scan(&out, &disc, "reduce k")?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthSides {
    #[default]
    NorthSouth,
    EastWest,
}

impl std::str::FromStr for OrthSides {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "north-south" => Ok(OrthSides::NorthSouth),
            "east-west" => Ok(OrthSides::EastWest),
            _ => Err(Error::InvalidArgument(format!("unknown sides '{s}' (expected north-south or east-west)"))),
        }
    }
}

pub fn hermite_h0(t: f64) -> f64 {
    (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t)
}

pub fn hermite_h1(t: f64) -> f64 {
    (3.0 - 2.0 * t) * t * t
}

/// DOFs whose function is nonzero on the given side.
pub fn side_dofs(space: &ThbSpace, side: Side) -> Vec<usize> {
    space
        .functions()
        .iter()
        .enumerate()
        .filter(|(_, &(l, i, j))| {
            let nb = space.knot_vector(l).num_basis();
            match side {
                Side::West => i == 0,
                Side::East => i == nb - 1,
                Side::South => j == 0,
                Side::North => j == nb - 1,
            }
        })
        .map(|(d, _)| d)
        .collect()
}

const MONOTONE_SAMPLES: usize = 200;

/// Control map making the recomputed map orthogonal at two opposite sides.
///
/// Solves the Laplace-Beltrami problem for `f` on the base map with `f = 0`
/// and `f = 1` on the two other sides, then blends the traces of `f` with
/// cubic Hermite functions.
pub fn boundary_orth_pipeline(x_star: &GeometryMap, sides: OrthSides, space: Arc<ThbSpace>) -> Result<ControlMap> {
    let disc = Disc::new(space.clone());
    let jets = jets_on(x_star, &disc)?;
    let mut diff = Vec::with_capacity(jets.len());
    for (j, p) in jets.iter().zip(&disc.rule.points) {
        let d = j.det();
        if !(d > 0.0) {
            return Err(Error::NotBijective(format!("base map has det J = {d:e} at ({}, {})", p[0], p[1])));
        }
        let (g11, g12, g22) = assembly::metric(&j.jac);
        diff.push([[g22 / d, -g12 / d], [-g12 / d, g11 / d]]);
    }
    let (lo_side, hi_side, coord) = match sides {
        OrthSides::NorthSouth => (Side::West, Side::East, 0),
        OrthSides::EastWest => (Side::South, Side::North, 1),
    };
    let mut fixed = vec![false; space.num_dofs()];
    for d in side_dofs(&space, lo_side).into_iter().chain(side_dofs(&space, hi_side)) {
        fixed[d] = true;
    }
    let interior: Vec<usize> = (0..space.num_dofs()).filter(|&d| !fixed[d]).collect();
    let mut index = vec![None; space.num_dofs()];
    for (k, &d) in interior.iter().enumerate() {
        index[d] = Some(k);
    }
    let dofs = DofMap { interior, index };
    let id = space.identity_coeffs();
    let values: Vec<[f64; 2]> = id.iter().map(|c| [c[coord], 0.0]).collect();
    let sol = diffusion_solve(&disc, &diff, &dofs, &values)?;
    let fmap = GeometryMap::new(space.clone(), sol.iter().map(|v| [v[0], 0.0]).collect())?;
    let f = |a: f64, b: f64| -> f64 {
        let p = if coord == 0 { [a, b] } else { [b, a] };
        fmap.eval(p[0], p[1]).map(|m| m.x[0]).unwrap_or(f64::NAN)
    };
    for (edge, name) in [(0.0, if coord == 0 { "south" } else { "west" }), (1.0, if coord == 0 { "north" } else { "east" })] {
        let mut prev = f(0.0, edge);
        for i in 1..MONOTONE_SAMPLES {
            let t = i as f64 / (MONOTONE_SAMPLES - 1) as f64;
            let v = f(t, edge);
            if !(v > prev) {
                return Err(Error::NotBijective(format!(
                    "boundary-orthogonal control map would fold: f is not increasing along the {name} side near t = {t:.4}"
                )));
            }
            prev = v;
        }
    }
    let smap = |xi: f64, eta: f64| -> [f64; 2] {
        if coord == 0 {
            [f(xi, 0.0) * hermite_h0(eta) + f(xi, 1.0) * hermite_h1(eta), eta]
        } else {
            [xi, f(eta, 0.0) * hermite_h0(xi) + f(eta, 1.0) * hermite_h1(xi)]
        }
    };
    let curves = FnCurves(|side: Side, t: f64| {
        let p = side.point(t);
        smap(p[0], p[1])
    });
    let (bc, _) = assembly::trace_project(&space, &curves)?;
    let vals: Vec<[f64; 2]> = disc.rule.points.iter().map(|p| smap(p[0], p[1])).collect();
    let coeffs = assembly::l2_project_values(&disc, &vals, Subset::Interior, Some(&bc))?;
    let s = ControlMap { map: GeometryMap::new(space, coeffs)? };
    fold_scan(&s, &disc, "use a finer space for f")?;
    Ok(s)
}

/// Solve the reparameterized problem on `disc` with the boundary data of
/// `x*`, started from the projection of `x* o s`. For control maps with
/// identity trace the solution approximates `x* o s`.
pub fn recompute(
    disc: &Disc,
    x_star: &GeometryMap,
    s: &ControlMap,
    cfg: &SolverConfig,
) -> Result<(GeometryMap, SolveReport)> {
    let ctrl = s.control_data(disc)?;
    let comp = |p: [f64; 2]| -> Result<[f64; 2]> {
        let q = s.eval(p)?;
        Ok(x_star.eval(q[0], q[1])?.x)
    };
    let curves = FnCurves(|side: Side, t: f64| {
        let p = side.point(t);
        x_star.eval(p[0], p[1]).map(|j| j.x).unwrap_or([f64::NAN; 2])
    });
    let (bc, _) = assembly::trace_project(&disc.space, &curves)?;
    if bc.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::OutOfDomain("base map could not be evaluated on the boundary".into()));
    }
    let vals = crate::par::map(disc.rule.num_points(), |k| comp(disc.rule.points[k]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let c0 = assembly::l2_project_values(disc, &vals, Subset::Interior, Some(&bc))?;
    let x0 = GeometryMap::new(disc.space.clone(), c0)?;
    solvers::solve(disc, &x0, cfg, Some(&ctrl))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    Bezier,
    CoarseSlack,
    Pointwise,
    Cone,
}

impl ConstraintKind {
    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::Bezier => "bezier",
            ConstraintKind::CoarseSlack => "coarse-slack",
            ConstraintKind::Pointwise => "pointwise",
            ConstraintKind::Cone => "cone",
        }
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [ConstraintKind::Bezier, ConstraintKind::CoarseSlack, ConstraintKind::Pointwise, ConstraintKind::Cone]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown constraint '{s}' (expected bezier, coarse-slack, pointwise or cone)"
                ))
            })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintParams {
    /// Sector margin of the cone constraint.
    pub cone_eps: f64,
    /// Pointwise bounds relative to the reference determinant.
    pub alpha_l: f64,
    pub alpha_u: f64,
    /// Pointwise samples per element and direction.
    pub samples_per_dir: usize,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self { cone_eps: 1e-3, alpha_l: 0.05, alpha_u: 4.0, samples_per_dir: 6 }
    }
}

enum ConstraintData {
    Bezier { rule: QuadRule, table: BasisTable, reduce: Vec<Vec<f64>> },
    CoarseSlack { rule: QuadRule, table: BasisTable, coarse: BasisTable, ncoarse: usize, mass: CsrMatrix },
    Pointwise { rule: QuadRule, table: BasisTable, lo: Vec<f64>, hi: Vec<f64> },
    Cone { d1: Vec<(usize, usize)>, d2: Vec<(usize, usize)>, eps: f64 },
}

/// Bijectivity constraints on a map from a space with fixed boundary DOFs.
/// Unknowns are the interior coefficients (x block, then y block), followed
/// by slack variables for `coarse-slack`.
pub struct ConstraintSet {
    pub kind: ConstraintKind,
    dofs: DofMap,
    data: ConstraintData,
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn bernstein(n: usize, a: usize, t: f64) -> f64 {
    binom(n, a) * t.powi(a as i32) * (1.0 - t).powi((n - a) as i32)
}

/// Rows `R` with `d_hat = R f` on a reference element: `(M x M)^-1` applied
/// to the Bernstein moments at the `2p x 2p` Gauss points.
fn bezier_reduction(p: usize) -> Result<Vec<Vec<f64>>> {
    let n = 2 * p - 1;
    let m = n + 1;
    let trip: Vec<(usize, usize, f64)> = (0..m)
        .flat_map(|a| (0..m).map(move |b| (a, b, binom(n, a) * binom(n, b) / binom(2 * n, a + b) / (2 * n + 1) as f64)))
        .collect();
    let lu = SparseLu::new(&CsrMatrix::from_triplets(m, m, &trip))?;
    let mut minv = vec![vec![0.0; m]; m];
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let col = lu.solve(&e)?;
        for i in 0..m {
            minv[i][j] = col[i];
        }
    }
    let (gx, gw) = gauss_legendre(2 * p);
    let q = gx.len();
    // moments of the 1D basis: g1[a][k] = B_a(x_k) w_k
    let g1: Vec<Vec<f64>> = (0..m).map(|a| (0..q).map(|k| bernstein(n, a, gx[k]) * gw[k]).collect()).collect();
    // r1 = M^-1 g1
    let r1: Vec<Vec<f64>> =
        (0..m).map(|i| (0..q).map(|k| (0..m).map(|j| minv[i][j] * g1[j][k]).sum()).collect()).collect();
    let mut r = vec![vec![0.0; q * q]; m * m];
    for ib in 0..m {
        for ia in 0..m {
            for kb in 0..q {
                for ka in 0..q {
                    r[ib * m + ia][kb * q + ka] = r1[ia][ka] * r1[ib][kb];
                }
            }
        }
    }
    Ok(r)
}

/// Rule with `ns x ns` cell-centered samples per element.
fn sample_rule(space: &ThbSpace, ns: usize) -> QuadRule {
    let mut offsets = Vec::with_capacity(space.num_cells() + 1);
    let mut points = Vec::new();
    let mut cell_of_point = Vec::new();
    for (c, cell) in space.cells().iter().enumerate() {
        offsets.push(points.len());
        let [x0, x1, y0, y1] = cell.bounds;
        for b in 0..ns {
            for a in 0..ns {
                let (u, v) = ((a as f64 + 0.5) / ns as f64, (b as f64 + 0.5) / ns as f64);
                points.push([x0 + (x1 - x0) * u, y0 + (y1 - y0) * v]);
                cell_of_point.push(c);
            }
        }
    }
    offsets.push(points.len());
    let weights = vec![0.0; points.len()];
    QuadRule { q: ns, offsets, points, weights, cell_of_point }
}

/// `det` of the map and its gradient rows at one table point.
fn det_and_row(table: &BasisTable, coeffs: &[[f64; 2]], dofs: &DofMap, c: usize, k: usize) -> (f64, Vec<(usize, f64)>) {
    let mj = assembly::map_jet_at(table, coeffs, c, k);
    let cof = cofactor(&mj.jac);
    let n = dofs.n();
    let mut row = Vec::new();
    for (l, &d) in table.cell_dofs[c].iter().enumerate() {
        if let Some(i) = dofs.index[d] {
            let g = &table.jets[k][l];
            row.push((i, cof[0][0] * g[1] + cof[0][1] * g[2]));
            row.push((n + i, cof[1][0] * g[1] + cof[1][1] * g[2]));
        }
    }
    (mj.det(), row)
}

fn merge_rows(parts: Vec<(f64, Vec<(usize, f64)>)>, weights: &[f64]) -> Vec<(usize, f64)> {
    let mut acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for ((_, row), w) in parts.iter().zip(weights) {
        if *w != 0.0 {
            for &(i, v) in row {
                *acc.entry(i).or_insert(0.0) += w * v;
            }
        }
    }
    acc.into_iter().collect()
}

impl ConstraintSet {
    /// Build constraints for maps in `space`. `reference` supplies the
    /// pointwise bounds `alpha * det J(reference)`.
    pub fn build(
        kind: ConstraintKind,
        space: &Arc<ThbSpace>,
        reference: &GeometryMap,
        params: &ConstraintParams,
    ) -> Result<Self> {
        let dofs = DofMap::new(space);
        let p = space.degree();
        let data = match kind {
            ConstraintKind::Bezier => {
                let rule = QuadRule::new(space, 2 * p);
                let table = BasisTable::new(space, &rule);
                ConstraintData::Bezier { rule, table, reduce: bezier_reduction(p)? }
            }
            ConstraintKind::CoarseSlack => {
                if space.regularity() < 1 {
                    return Err(Error::InvalidArgument("coarse-slack constraint needs regularity >= 1".into()));
                }
                let cs = ThbSpace::new(2 * p - 1, space.regularity() - 1, space.mesh().clone())?;
                let rule = QuadRule::new(space, 2 * p);
                let table = BasisTable::new(space, &rule);
                let coarse = BasisTable::new(&cs, &rule);
                let all = DofMap::all(cs.num_dofs());
                let mass = assembly::mass_matrix(&rule, TestSpace { table: &coarse, dofs: &all });
                ConstraintData::CoarseSlack { rule, table, coarse, ncoarse: cs.num_dofs(), mass }
            }
            ConstraintKind::Pointwise => {
                if !(0.0 <= params.alpha_l && params.alpha_l <= params.alpha_u) || params.samples_per_dir == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "pointwise bounds need 0 <= alpha_l <= alpha_u and samples > 0, got {} and {}",
                        params.alpha_l, params.alpha_u
                    )));
                }
                let rule = sample_rule(space, params.samples_per_dir);
                let table = BasisTable::new(space, &rule);
                let mut lo = Vec::with_capacity(rule.num_points());
                let mut hi = Vec::with_capacity(rule.num_points());
                for (k, pt) in rule.points.iter().enumerate() {
                    let d = if Arc::ptr_eq(&reference.space, space) {
                        assembly::map_jet_at(&table, &reference.coeffs, rule.cell_of_point[k], k).det()
                    } else {
                        reference.eval(pt[0], pt[1])?.det()
                    };
                    if !(d > 0.0) {
                        return Err(Error::Infeasible(format!(
                            "reference map has det J = {d:e} at sample ({}, {})",
                            pt[0], pt[1]
                        )));
                    }
                    lo.push(params.alpha_l * d);
                    hi.push(params.alpha_u * d);
                }
                ConstraintData::Pointwise { rule, table, lo, hi }
            }
            ConstraintKind::Cone => {
                if space.mesh().num_levels() > 1 {
                    return Err(Error::InvalidArgument(
                        "cone constraint needs a tensor-product space without local refinement".into(),
                    ));
                }
                let nb = space.knot_vector(0).num_basis();
                let id = |i: usize, j: usize| space.dof_of(0, i, j).expect("tensor-product DOF");
                let mut d1 = Vec::new();
                let mut d2 = Vec::new();
                for j in 0..nb {
                    for i in 0..nb {
                        if i + 1 < nb {
                            d1.push((id(i, j), id(i + 1, j)));
                        }
                        if j + 1 < nb {
                            d2.push((id(i, j), id(i, j + 1)));
                        }
                    }
                }
                let keep = |&(a, b): &(usize, usize)| dofs.index[a].is_some() || dofs.index[b].is_some();
                d1.retain(keep);
                d2.retain(keep);
                ConstraintData::Cone { d1, d2, eps: params.cone_eps }
            }
        };
        Ok(Self { kind, dofs, data })
    }

    pub fn num_unknowns(&self) -> usize {
        2 * self.dofs.n()
    }

    pub fn num_slack(&self) -> usize {
        match &self.data {
            ConstraintData::CoarseSlack { ncoarse, .. } => *ncoarse,
            _ => 0,
        }
    }

    /// Bezier coefficients `d_hat` of `det J` on every element.
    pub fn bezier_coefficients(&self, coeffs: &[[f64; 2]]) -> Option<Vec<f64>> {
        let ConstraintData::Bezier { rule, table, reduce } = &self.data else { return None };
        let mut out = Vec::new();
        for c in 0..rule.num_cells() {
            let dets: Vec<f64> = rule.cell_range(c).map(|k| assembly::map_jet_at(table, coeffs, c, k).det()).collect();
            out.extend(reduce.iter().map(|r| r.iter().zip(&dets).map(|(a, b)| a * b).sum::<f64>()));
        }
        Some(out)
    }

    /// `f_i = int phi_i det J` over the coarse space, with gradient rows.
    fn coarse_moments(&self, coeffs: &[[f64; 2]]) -> Vec<(f64, Vec<(usize, f64)>)> {
        let ConstraintData::CoarseSlack { rule, table, coarse, ncoarse, .. } = &self.data else { return Vec::new() };
        let parts = crate::par::map(rule.num_cells(), |c| {
            let mut loc: Vec<(usize, f64, std::collections::BTreeMap<usize, f64>)> = coarse.cell_dofs[c]
                .iter()
                .map(|&d| (d, 0.0, std::collections::BTreeMap::new()))
                .collect();
            for k in rule.cell_range(c) {
                let (det, row) = det_and_row(table, coeffs, &self.dofs, c, k);
                let w = rule.weights[k];
                for (l, entry) in loc.iter_mut().enumerate() {
                    let phi = coarse.jets[k][l][0];
                    if phi == 0.0 {
                        continue;
                    }
                    entry.1 += w * phi * det;
                    for &(i, v) in &row {
                        *entry.2.entry(i).or_insert(0.0) += w * phi * v;
                    }
                }
            }
            loc
        });
        let mut f = vec![0.0; *ncoarse];
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); *ncoarse];
        for part in parts {
            for (d, v, r) in part {
                f[d] += v;
                for (i, g) in r {
                    *rows[d].entry(i).or_insert(0.0) += g;
                }
            }
        }
        f.into_iter().zip(rows).map(|(v, r)| (v, r.into_iter().collect())).collect()
    }

    /// Initial slack `e = M^-1 f(coeffs)`.
    pub fn initial_slack(&self, coeffs: &[[f64; 2]]) -> Result<Vec<f64>> {
        let ConstraintData::CoarseSlack { mass, .. } = &self.data else { return Ok(Vec::new()) };
        let f: Vec<f64> = self.coarse_moments(coeffs).into_iter().map(|(v, _)| v).collect();
        SparseLu::new(mass)?.solve(&f)
    }

    /// Inequalities (`>= 0`) and equalities (`= 0`) with rows over
    /// `[interior unknowns, slack]`.
    pub fn eval(&self, coeffs: &[[f64; 2]], slack: &[f64]) -> (ConstraintEval, ConstraintEval) {
        let mut ineq = ConstraintEval::default();
        let mut eq = ConstraintEval::default();
        let n = self.dofs.n();
        match &self.data {
            ConstraintData::Bezier { rule, table, reduce } => {
                let parts = crate::par::map(rule.num_cells(), |c| {
                    let pts: Vec<_> = rule.cell_range(c).map(|k| det_and_row(table, coeffs, &self.dofs, c, k)).collect();
                    reduce
                        .iter()
                        .map(|r| {
                            let v: f64 = r.iter().zip(&pts).map(|(a, p)| a * p.0).sum();
                            (v, merge_rows(pts.clone(), r))
                        })
                        .collect::<Vec<_>>()
                });
                for part in parts {
                    for (v, row) in part {
                        ineq.push(v, row);
                    }
                }
            }
            ConstraintData::CoarseSlack { mass, .. } => {
                let off = 2 * n;
                let me = mass.matvec(slack);
                for (i, (v, mut row)) in self.coarse_moments(coeffs).into_iter().enumerate() {
                    for idx in mass.row_ptr[i]..mass.row_ptr[i + 1] {
                        row.push((off + mass.col_idx[idx], -mass.vals[idx]));
                    }
                    eq.push(v - me[i], row);
                }
                for (j, e) in slack.iter().enumerate() {
                    ineq.push(*e, vec![(off + j, 1.0)]);
                }
            }
            ConstraintData::Pointwise { rule, table, lo, hi } => {
                let parts = crate::par::map(rule.num_cells(), |c| {
                    rule.cell_range(c).map(|k| (k, det_and_row(table, coeffs, &self.dofs, c, k))).collect::<Vec<_>>()
                });
                for part in parts {
                    for (k, (d, row)) in part {
                        let neg: Vec<(usize, f64)> = row.iter().map(|&(i, v)| (i, -v)).collect();
                        ineq.push(d - lo[k], row);
                        ineq.push(hi[k] - d, neg);
                    }
                }
            }
            ConstraintData::Cone { d1, d2, eps } => {
                let e1 = 1.0 + eps;
                // (coefficient on v_x, coefficient on v_y) of each half-plane
                let planes1 = [(1.0, -e1), (1.0, e1)];
                let planes2 = [(-e1, 1.0), (e1, 1.0)];
                for (pairs, planes) in [(d1, planes1), (d2, planes2)] {
                    for &(a, b) in pairs {
                        let v = [coeffs[b][0] - coeffs[a][0], coeffs[b][1] - coeffs[a][1]];
                        for (cx, cy) in planes {
                            let mut row = Vec::new();
                            for (d, sgn) in [(b, 1.0), (a, -1.0)] {
                                if let Some(i) = self.dofs.index[d] {
                                    row.push((i, sgn * cx));
                                    row.push((n + i, sgn * cy));
                                }
                            }
                            ineq.push(cx * v[0] + cy * v[1], row);
                        }
                    }
                }
            }
        }
        (ineq, eq)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoundaryProfile {
    pub lambda_max: f64,
    pub delta: f64,
}

/// One weighted term of an optimization cost.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CostTerm {
    pub functional: Functional,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    /// Evaluate `Q(s)` of the control map itself instead of the pulled-back
    /// `Q^s` (domain optimization only).
    #[serde(default)]
    pub plain: bool,
    /// Weight multiplied by `1 + lambda_max exp(-dist / delta)`, `dist` the
    /// distance to the south or north side.
    #[serde(default)]
    pub profile: Option<BoundaryProfile>,
}

fn unit_weight() -> f64 {
    1.0
}

impl CostTerm {
    pub fn new(functional: Functional) -> Self {
        Self { functional, weight: 1.0, plain: false, profile: None }
    }

    fn weight_at(&self, p: [f64; 2]) -> f64 {
        match &self.profile {
            None => self.weight,
            Some(pr) => {
                let dist = p[1].min(1.0 - p[1]);
                self.weight * (1.0 + pr.lambda_max * (-dist / pr.delta).exp())
            }
        }
    }
}

impl std::str::FromStr for CostTerm {
    type Err = Error;
    /// `name[:weight][:plain]`
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let mut t = CostTerm::new(parts.next().unwrap_or("").parse()?);
        for p in parts {
            if p == "plain" {
                t.plain = true;
            } else {
                t.weight = p.parse().map_err(|_| Error::InvalidArgument(format!("bad weight '{p}' in '{s}'")))?;
            }
        }
        Ok(t)
    }
}

/// Weighted sum of quality terms.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QualitySpec {
    pub terms: Vec<CostTerm>,
}

impl QualitySpec {
    pub fn single(f: Functional) -> Self {
        Self { terms: vec![CostTerm::new(f)] }
    }

    fn validate(&self, pulled: bool) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidArgument("empty cost".into()));
        }
        for t in &self.terms {
            if pulled && !t.plain && t.functional.uses_hessian() {
                return Err(Error::InvalidArgument(format!(
                    "{} depends on second derivatives and has no pulled-back form; mark it plain",
                    t.functional.name()
                )));
            }
        }
        Ok(())
    }
}

/// Cost over the rule of `disc`; with `base` the non-plain terms use the
/// Jacobian `J*(s) T` of the composition `x* o s`.
struct Cost<'a> {
    disc: &'a Disc,
    spec: &'a QualitySpec,
    base: Option<&'a GeometryMap>,
}

impl Cost<'_> {
    fn eval(&self, coeffs: &[[f64; 2]]) -> Result<(f64, Vec<f64>)> {
        let disc = self.disc;
        let n = disc.dofs.n();
        let zero_h = [[[0.0; 2]; 2]; 2];
        let parts = crate::par::map(disc.rule.num_cells(), |c| {
            let cd = &disc.table.cell_dofs[c];
            let mut loc = vec![[0.0; 2]; cd.len()];
            let mut val = 0.0;
            for k in disc.rule.cell_range(c) {
                let mj = disc.map_jet(coeffs, k);
                let p = disc.rule.points[k];
                let composed = match self.base {
                    Some(x) if self.spec.terms.iter().any(|t| !t.plain) => {
                        Some(x.eval(mj.x[0].clamp(0.0, 1.0), mj.x[1].clamp(0.0, 1.0)).map_err(|_| ())?)
                    }
                    _ => None,
                };
                for term in &self.spec.terms {
                    let w = disc.rule.weights[k] * term.weight_at(p);
                    // d/ds of the value through J*(s), then through T
                    let (pd, d0, d_jac) = match (&composed, term.plain) {
                        (Some(xs), false) => {
                            let j = matmul(&xs.jac, &mj.jac);
                            if term.functional.needs_bijective() && !(det2(&j) > 0.0) {
                                return Err(());
                            }
                            let pd = point_derivative(term.functional, &j, &zero_h);
                            let dtt = matmul(&pd.d_jac, &transpose(&mj.jac));
                            let mut d0 = [0.0; 2];
                            for (m, dm) in d0.iter_mut().enumerate() {
                                for a in 0..2 {
                                    for b in 0..2 {
                                        *dm += dtt[a][b] * xs.hess[a][b][m];
                                    }
                                }
                            }
                            (pd, d0, matmul(&transpose(&xs.jac), &pd.d_jac))
                        }
                        _ => {
                            if term.functional.needs_bijective() && !(mj.det() > 0.0) {
                                return Err(());
                            }
                            let pd = point_derivative(term.functional, &mj.jac, &mj.hess);
                            (pd, [0.0; 2], pd.d_jac)
                        }
                    };
                    val += w * pd.value;
                    for (l, jet) in disc.table.jets[k].iter().enumerate() {
                        for comp in 0..2 {
                            let h = &pd.d_hess[comp];
                            loc[l][comp] += w
                                * (d0[comp] * jet[0]
                                    + d_jac[comp][0] * jet[1]
                                    + d_jac[comp][1] * jet[2]
                                    + h[0][0] * jet[3]
                                    + (h[0][1] + h[1][0]) * jet[4]
                                    + h[1][1] * jet[5]);
                        }
                    }
                }
            }
            Ok((val, loc))
        });
        let mut value = 0.0;
        let mut grad = vec![0.0; 2 * n];
        for (c, part) in parts.into_iter().enumerate() {
            let (v, loc) = part.map_err(|_| Error::NotBijective("cost needs det J > 0".into()))?;
            value += v;
            for (l, &d) in disc.table.cell_dofs[c].iter().enumerate() {
                if let Some(i) = disc.dofs.index[d] {
                    grad[i] += loc[l][0];
                    grad[n + i] += loc[l][1];
                }
            }
        }
        Ok((value, grad))
    }
}

struct MapProblem<'a> {
    disc: &'a Disc,
    base: Vec<[f64; 2]>,
    cost: Cost<'a>,
    cons: &'a ConstraintSet,
}

impl MapProblem<'_> {
    fn coeffs(&self, x: &[f64]) -> Vec<[f64; 2]> {
        let mut c = self.base.clone();
        self.disc.set_interior(&mut c, &x[..self.disc.n_unknowns()]);
        c
    }
}

impl Problem for MapProblem<'_> {
    fn dim(&self) -> usize {
        self.disc.n_unknowns() + self.cons.num_slack()
    }

    fn objective(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, mut g) = self.cost.eval(&self.coeffs(x))?;
        g.resize(self.dim(), 0.0);
        Ok((v, g))
    }

    fn inequalities(&self, x: &[f64]) -> Result<ConstraintEval> {
        let nu = self.disc.n_unknowns();
        Ok(self.cons.eval(&self.coeffs(x), &x[nu..]).0)
    }

    fn equalities(&self, x: &[f64]) -> Result<ConstraintEval> {
        let nu = self.disc.n_unknowns();
        Ok(self.cons.eval(&self.coeffs(x), &x[nu..]).1)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationConfig {
    pub constraint: ConstraintParams,
    pub optim: OptimConfig,
}

/// Constrained minimization of the cost over control maps in `space_s`
/// with the trace of the identity, started from the identity.
pub fn optimize_domain(
    x_star: &GeometryMap,
    cost: &QualitySpec,
    kind: ConstraintKind,
    space_s: Arc<ThbSpace>,
    cfg: &OptimizationConfig,
) -> Result<(ControlMap, OptimReport)> {
    cost.validate(true)?;
    let disc = Disc::new(space_s.clone());
    let jets = jets_on(x_star, &disc)?;
    if let Some((k, j)) = jets.iter().enumerate().find(|(_, j)| !(j.det() > 0.0)) {
        let p = disc.rule.points[k];
        return Err(Error::NotBijective(format!("base map has det J = {:e} at ({}, {})", j.det(), p[0], p[1])));
    }
    let id = ControlMap::identity(space_s.clone());
    let cons = ConstraintSet::build(kind, &space_s, &id.map, &cfg.constraint)?;
    let prob = MapProblem {
        disc: &disc,
        base: id.map.coeffs.clone(),
        cost: Cost { disc: &disc, spec: cost, base: Some(x_star) },
        cons: &cons,
    };
    let mut x0 = disc.get_interior(&id.map.coeffs);
    x0.extend(cons.initial_slack(&id.map.coeffs)?);
    let (x, rep) = optim::minimize(&prob, &x0, &cfg.optim).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Infeasible(format!("identity start is not strictly feasible: {m}")),
        e => e,
    })?;
    let s = ControlMap { map: GeometryMap::new(space_s, prob.coeffs(&x))? };
    fold_scan(&s, &disc, "use a sufficient constraint or more samples")?;
    Ok((s, rep))
}

/// Constrained minimization of the cost directly over the interior control
/// points of `x_star`.
pub fn optimize_geometry_direct(
    x_star: &GeometryMap,
    cost: &QualitySpec,
    kind: ConstraintKind,
    cfg: &OptimizationConfig,
) -> Result<(GeometryMap, OptimReport)> {
    if !matches!(kind, ConstraintKind::Bezier | ConstraintKind::Pointwise) {
        return Err(Error::InvalidArgument(format!(
            "direct optimization supports the bezier and pointwise constraints, not {}",
            kind.name()
        )));
    }
    cost.validate(false)?;
    let disc = Disc::new(x_star.space.clone());
    let cons = ConstraintSet::build(kind, &x_star.space, x_star, &cfg.constraint)?;
    if let Some(d) = cons.bezier_coefficients(&x_star.coeffs) {
        let m = d.iter().copied().fold(f64::INFINITY, f64::min);
        if !(m > 0.0) {
            return Err(Error::Infeasible(format!(
                "start violates the bezier constraint (min coefficient {m:e}); use the pointwise constraint"
            )));
        }
    }
    let plain = QualitySpec {
        terms: cost.terms.iter().map(|t| CostTerm { plain: true, ..t.clone() }).collect(),
    };
    let prob = MapProblem {
        disc: &disc,
        base: x_star.coeffs.clone(),
        cost: Cost { disc: &disc, spec: &plain, base: None },
        cons: &cons,
    };
    let x0 = disc.get_interior(&x_star.coeffs);
    let (x, rep) = optim::minimize(&prob, &x0, &cfg.optim)?;
    Ok((GeometryMap::new(x_star.space.clone(), prob.coeffs(&x))?, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn space(n: usize) -> Arc<ThbSpace> {
        Arc::new(ThbSpace::uniform(3, 2, n).unwrap())
    }

    fn project(sp: &Arc<ThbSpace>, f: impl Fn(f64, f64) -> [f64; 2]) -> GeometryMap {
        let d = Disc::new(sp.clone());
        GeometryMap::new(sp.clone(), assembly::l2_project(&d, f, Subset::All, None).unwrap()).unwrap()
    }

    fn bump(a: f64) -> impl Fn(f64, f64) -> [f64; 2] {
        move |x, y| {
            let b = a * x * (1.0 - x) * y * (1.0 - y);
            [x + b * (1.0 + y), y + b * (2.0 - x)]
        }
    }

    #[test]
    fn identity_has_zero_control_matrices() {
        let sp = space(3);
        let d = Disc::new(sp.clone());
        let cd = ControlMap::identity(sp).control_data(&d).unwrap();
        for k in 0..cd.det_t.len() {
            assert!((cd.det_t[k] - 1.0).abs() < 1e-13);
            for m in [cd.p1[k], cd.p2[k]] {
                assert!(m.iter().flatten().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn quadratic_control_matrices_match_closed_form() {
        // s = (xi^2, eta): p^11 = -(1/xi, 0), all other p^ij vanish
        let s = project(&space(2), |x, y| [x * x, y]);
        let pts = [[0.3, 0.4], [0.7, 0.1], [0.55, 0.9]];
        let cd = control_matrices(&s, &pts).unwrap();
        for (k, p) in pts.iter().enumerate() {
            assert!((cd.p1[k][0][0] + 1.0 / p[0]).abs() < 1e-10);
            assert!((cd.det_t[k] - 2.0 * p[0]).abs() < 1e-12);
            for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                assert!(cd.p1[k][a][b].abs() < 1e-10);
            }
            assert!(cd.p2[k].iter().flatten().all(|v| v.abs() < 1e-10));
        }
        assert!(control_matrices(&s, &[[0.0, 0.5]]).is_err());
    }

    #[test]
    fn maxprinciple_trivial_cases() {
        let sp = space(4);
        let id = GeometryMap::identity(sp.clone());
        let s0 = maxprinciple_reparam(&project(&sp, bump(1.0)), 0.0, sp.clone()).unwrap();
        assert_eq!(s0.map.coeffs, id.coeffs);
        let s1 = maxprinciple_reparam(&id, 1.5, sp.clone()).unwrap();
        for (a, b) in s1.map.coeffs.iter().zip(&id.coeffs) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn maxprinciple_contracts_where_the_base_map_inflates() {
        // det J* grows with xi; the control map should pull points toward xi = 1
        let sp = space(6);
        let xs = project(&sp, |x, y| [x + x * x, y]);
        let s = maxprinciple_reparam(&xs, 1.0, sp.clone()).unwrap();
        assert!(s.trace_deviation() < 1e-12);
        let v = s.eval([0.5, 0.5]).unwrap();
        assert!(v[0] > 0.5, "{v:?}");
    }

    #[test]
    fn hermite_functions() {
        assert_eq!((hermite_h0(0.0), hermite_h0(1.0), hermite_h1(0.0), hermite_h1(1.0)), (1.0, 0.0, 0.0, 1.0));
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            assert!((hermite_h0(t) + hermite_h1(t) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn boundary_orth_of_identity_is_identity() {
        let sp = space(4);
        let id = GeometryMap::identity(sp.clone());
        for sides in [OrthSides::NorthSouth, OrthSides::EastWest] {
            let s = boundary_orth_pipeline(&id, sides, sp.clone()).unwrap();
            for (a, b) in s.map.coeffs.iter().zip(&id.coeffs) {
                assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10, "{sides:?}");
            }
        }
    }

    #[test]
    fn sprime_of_identity_is_identity() {
        let sp = space(4);
        let id = ControlMap::identity(sp.clone());
        let x = GeometryMap::identity(sp.clone());
        let s = sprime_postprocess(&id, &x, 0.0, 1.0).unwrap();
        for (a, b) in s.map.coeffs.iter().zip(&id.map.coeffs) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_constraint_values() {
        let sp = space(4);
        let id = GeometryMap::identity(sp.clone());
        let p = ConstraintParams::default();
        let bz = ConstraintSet::build(ConstraintKind::Bezier, &sp, &id, &p).unwrap();
        let d = bz.bezier_coefficients(&id.coeffs).unwrap();
        assert_eq!(d.len(), 16 * 36);
        assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let cone = ConstraintSet::build(ConstraintKind::Cone, &sp, &id, &p).unwrap();
        let (ineq, _) = cone.eval(&id.coeffs, &[]);
        assert!(ineq.values.iter().all(|v| *v > 0.0));
        let cs = ConstraintSet::build(ConstraintKind::CoarseSlack, &sp, &id, &p).unwrap();
        let e = cs.initial_slack(&id.coeffs).unwrap();
        assert!(e.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let (_, eq) = cs.eval(&id.coeffs, &e);
        assert!(eq.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bezier_coefficients_bound_the_determinant() {
        let sp = space(3);
        let x = project(&sp, bump(2.0));
        let bz = ConstraintSet::build(ConstraintKind::Bezier, &sp, &x, &ConstraintParams::default()).unwrap();
        let d = bz.bezier_coefficients(&x.coeffs).unwrap();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // convex hull property of Bernstein coefficients
        for k in 0..200 {
            let p = [((k * 37) % 200) as f64 / 199.0, (k as f64) / 199.0];
            let det = x.eval(p[0], p[1]).unwrap().det();
            assert!(det >= lo - 1e-12 && det <= hi + 1e-12);
        }
    }

    #[test]
    fn constraint_gradients_match_central_differences() {
        let sp = space(4);
        let x = project(&sp, bump(1.0));
        let disc = Disc::new(sp.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for kind in [ConstraintKind::Bezier, ConstraintKind::CoarseSlack, ConstraintKind::Pointwise, ConstraintKind::Cone] {
            let cons = ConstraintSet::build(kind, &sp, &x, &ConstraintParams::default()).unwrap();
            let u = disc.get_interior(&x.coeffs);
            let slack: Vec<f64> = (0..cons.num_slack()).map(|_| rng.random_range(0.5..1.5)).collect();
            let mut full = u.clone();
            full.extend(&slack);
            let eval = |v: &[f64]| {
                let mut c = x.coeffs.clone();
                disc.set_interior(&mut c, &v[..u.len()]);
                let (a, b) = cons.eval(&c, &v[u.len()..]);
                (a, b)
            };
            let (ineq, eq) = eval(&full);
            let dense = |ce: &ConstraintEval, j: usize| -> Vec<f64> {
                ce.rows.iter().map(|r| r.iter().filter(|e| e.0 == j).map(|e| e.1).sum()).collect()
            };
            let mut cols: Vec<usize> = (0..5).map(|_| rng.random_range(0..u.len())).collect();
            if !slack.is_empty() {
                cols.push(u.len() + rng.random_range(0..slack.len()));
            }
            for j in cols {
                let h = 1e-6;
                let mut p = full.clone();
                p[j] += h;
                let mut m = full.clone();
                m[j] -= h;
                let (ip, ep) = eval(&p);
                let (im, em) = eval(&m);
                for (ce, plus, minus) in [(&ineq, &ip, &im), (&eq, &ep, &em)] {
                    let g = dense(ce, j);
                    for i in 0..g.len() {
                        let fd = (plus.values[i] - minus.values[i]) / (2.0 * h);
                        assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "{kind:?} row {i} col {j}: {fd} vs {}", g[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn cone_needs_tensor_space() {
        let sp = space(4);
        let (fine, _) = sp.refine_functions(&[12]).unwrap();
        let fine = Arc::new(fine);
        let id = GeometryMap::identity(fine.clone());
        assert!(ConstraintSet::build(ConstraintKind::Cone, &fine, &id, &ConstraintParams::default()).is_err());
    }

    #[test]
    fn pulled_back_cost_gradient() {
        let sp = space(3);
        let xs = project(&sp, bump(1.5));
        let disc = Disc::new(sp.clone());
        let s = project(&sp, bump(0.7));
        let spec = QualitySpec {
            terms: vec![
                CostTerm { functional: Functional::Area, weight: 1.0, plain: false, profile: None },
                CostTerm {
                    functional: Functional::Orthogonality,
                    weight: 0.5,
                    plain: false,
                    profile: Some(BoundaryProfile { lambda_max: 10.0, delta: 0.1 }),
                },
                CostTerm { functional: Functional::Winslow, weight: 1.0, plain: false, profile: None },
                CostTerm { functional: Functional::Uniformity, weight: 0.1, plain: true, profile: None },
            ],
        };
        let cost = Cost { disc: &disc, spec: &spec, base: Some(&xs) };
        let (_, g) = cost.eval(&s.coeffs).unwrap();
        let u = disc.get_interior(&s.coeffs);
        for i in [1, 4, u.len() - 2] {
            let h = 1e-6;
            let f = |d: f64| {
                let mut v = u.clone();
                v[i] += d;
                let mut c = s.coeffs.clone();
                disc.set_interior(&mut c, &v);
                cost.eval(&c).unwrap().0
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn harmonic_identity_is_optimal_for_length() {
        let sp = space(4);
        let id = GeometryMap::identity(sp.clone());
        let (s, rep) = optimize_domain(
            &id,
            &QualitySpec::single(Functional::Length),
            ConstraintKind::Cone,
            sp.clone(),
            &OptimizationConfig::default(),
        )
        .unwrap();
        assert!(rep.iterates_feasible);
        for (a, b) in s.map.coeffs.iter().zip(&id.coeffs) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn direct_optimization_of_stationary_start_returns_it() {
        let sp = space(4);
        let id = GeometryMap::identity(sp.clone());
        let (x, rep) = optimize_geometry_direct(
            &id,
            &QualitySpec::single(Functional::Length),
            ConstraintKind::Pointwise,
            &OptimizationConfig::default(),
        )
        .unwrap();
        assert!(rep.converged);
        assert_eq!(x.coeffs, id.coeffs);
        assert!(optimize_geometry_direct(
            &id,
            &QualitySpec::single(Functional::Length),
            ConstraintKind::Cone,
            &OptimizationConfig::default()
        )
        .is_err());
    }

    #[test]
    fn reparameterized_solve_with_identity_matches_base() {
        use crate::boundary::AnnulusSector;
        let sp = space(4);
        let disc = Disc::new(sp.clone());
        let x0 = assembly::coons_patch(&disc, &AnnulusSector).unwrap();
        let cfg = SolverConfig::default();
        let (xa, _) = solvers::solve(&disc, &x0, &cfg, None).unwrap();
        let id = ControlMap::identity(sp.clone());
        let (xb, _) = solvers::solve(&disc, &x0, &cfg, Some(&id.control_data(&disc).unwrap())).unwrap();
        for (a, b) in xa.coeffs.iter().zip(&xb.coeffs) {
            assert!((a[0] - b[0]).abs() <= 1e-10 && (a[1] - b[1]).abs() <= 1e-10);
        }
    }
}
