//! Goal-oriented error estimation and adaptive refinement.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assembly::{self, cofactor, ddot, det2, map_jet_at, trace_project, Disc, DofMap, EggParams, Field, TestSpace};
use crate::boundary::BoundaryCurves;
use crate::error::{Error, Result};
use crate::linalg::{self, SparseLu};
use crate::quadrature::BasisTable;
use crate::solvers::{self, SolveReport, SolverConfig};
use crate::thb::{GeometryMap, Jet, PointBasis, RefineInfo, ThbSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalKind {
    Bijectivity,
    Winslow,
}

impl std::str::FromStr for GoalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bijectivity" => Ok(GoalKind::Bijectivity),
            "winslow" => Ok(GoalKind::Winslow),
            _ => Err(Error::InvalidArgument(format!("unknown goal '{s}' (expected bijectivity or winslow)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PsiChoice {
    Zero,
    #[default]
    L2Projection,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Goal {
    /// Sum of `det J` over the frozen set of rule points where it is negative.
    Bijectivity { negative: Vec<usize> },
    /// Negative Winslow functional.
    Winslow,
}

impl Goal {
    pub fn kind(&self) -> GoalKind {
        match self {
            Goal::Bijectivity { .. } => GoalKind::Bijectivity,
            Goal::Winslow => GoalKind::Winslow,
        }
    }

    /// Freeze the goal at the current solution.
    pub fn at(kind: GoalKind, disc: &Disc, x: &[[f64; 2]]) -> Self {
        match kind {
            GoalKind::Bijectivity => Goal::Bijectivity { negative: negative_points(disc, x) },
            GoalKind::Winslow => Goal::Winslow,
        }
    }

    pub fn value(&self, disc: &Disc, x: &[[f64; 2]]) -> Result<f64> {
        match self {
            Goal::Bijectivity { negative } => Ok(negative.iter().map(|&k| disc.map_jet(x, k).det()).sum()),
            Goal::Winslow => Ok(-assembly::winslow_value(disc, x)?),
        }
    }

    /// `L'(x, phi)` for every interior function `phi` of `dir_space`, evaluated
    /// on `disc`'s rule; `basis_at(k)` gives the `dir_space` basis at point `k`.
    pub fn linearization<B>(&self, disc: &Disc, x: &[[f64; 2]], dofs: &DofMap, basis_at: B) -> Vec<f64>
    where
        B: Fn(usize) -> PointBasis,
    {
        let n = dofs.n();
        let mut out = vec![0.0; 2 * n];
        let mut add = |k: usize, scale: f64, m: [[f64; 2]; 2]| {
            let pb = basis_at(k);
            for (d, jet) in pb.dofs.iter().zip(&pb.jets) {
                if let Some(g) = dofs.index[*d] {
                    for comp in 0..2 {
                        out[comp * n + g] += scale * (m[comp][0] * jet[1] + m[comp][1] * jet[2]);
                    }
                }
            }
        };
        match self {
            Goal::Bijectivity { negative } => {
                for &k in negative {
                    add(k, 1.0, cofactor(&disc.map_jet(x, k).jac));
                }
            }
            Goal::Winslow => {
                for k in 0..disc.rule.num_points() {
                    let j = disc.map_jet(x, k).jac;
                    let d = det2(&j);
                    let s = ddot(&j, &j);
                    let cof = cofactor(&j);
                    let mut m = [[0.0; 2]; 2];
                    for a in 0..2 {
                        for b in 0..2 {
                            m[a][b] = 2.0 * j[a][b] / d - s * cof[a][b] / (d * d);
                        }
                    }
                    add(k, -disc.rule.weights[k], m);
                }
            }
        }
        out
    }
}

/// Rule points with `det J < 0`.
pub fn negative_points(disc: &Disc, x: &[[f64; 2]]) -> Vec<usize> {
    let dets = crate::par::map(disc.rule.num_points(), |k| disc.map_jet(x, k).det());
    dets.iter().enumerate().filter(|(_, d)| **d < 0.0).map(|(k, _)| k).collect()
}

/// Space used for the discrete adjoint problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdjointChoice {
    /// Degree `p + 1`, regularity `alpha + 1` on the primal mesh.
    #[default]
    KRefined,
    /// Degree `p + 1` with the primal regularity on the primal mesh; contains the primal space.
    DegreeElevated,
}

impl std::str::FromStr for AdjointChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k-refined" => Ok(AdjointChoice::KRefined),
            "degree-elevated" => Ok(AdjointChoice::DegreeElevated),
            _ => Err(Error::InvalidArgument(format!(
                "unknown adjoint space '{s}' (expected k-refined or degree-elevated)"
            ))),
        }
    }
}

/// Discrete adjoint solution plus the evaluation data the estimator needs.
#[derive(Clone, Debug)]
pub struct Adjoint {
    pub primal: Disc,
    pub x: Vec<[f64; 2]>,
    /// Adjoint space on the primal rule.
    pub disc: Disc,
    /// Full coefficient vector on the adjoint space (zero on the boundary).
    pub z: Vec<[f64; 2]>,
    pub rhs: Vec<f64>,
}

/// Solve `F'(x_h, phi, z) = L'(x_h, phi)` for all `phi` in the adjoint space.
pub fn solve_adjoint(primal: &Disc, x: &[[f64; 2]], goal: &Goal, choice: AdjointChoice, prm: &EggParams) -> Result<Adjoint> {
    let sp = &primal.space;
    let adj_space = match choice {
        AdjointChoice::KRefined => sp.adjoint_space()?,
        AdjointChoice::DegreeElevated => ThbSpace::new(sp.degree() + 1, sp.regularity(), sp.mesh().clone())?,
    };
    let adj = primal.sibling(Arc::new(adj_space));
    let rhs = goal.linearization(primal, x, &adj.dofs, |k| PointBasis {
        dofs: adj.table.cell_dofs[primal.rule.cell_of_point[k]].clone(),
        jets: adj.table.jets[k].clone(),
    });
    if rhs.iter().all(|v| *v == 0.0) {
        let z = vec![[0.0; 2]; adj.space.num_dofs()];
        return Ok(Adjoint { primal: primal.clone(), x: x.to_vec(), disc: adj, z, rhs });
    }
    let xf = Field { table: &primal.table, coeffs: x };
    let k = assembly::jacobian(&primal.rule, xf, adj.test(), adj.test(), prm, None);
    let lu = SparseLu::new(&k).map_err(|e| {
        Error::Singular(format!("adjoint linearization: {e}; restart from a uniformly refined space"))
    })?;
    let zu = lu.solve_transpose(&rhs)?;
    let z = adj.field_from_unknowns(&zu);
    Ok(Adjoint { primal: primal.clone(), x: x.to_vec(), disc: adj, z, rhs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualDecomposition {
    pub r: Vec<f64>,
    pub w: Vec<f64>,
    pub r_weighted: Vec<f64>,
    pub estimate: f64,
}

fn field_jets(table: &BasisTable, coeffs: &[[f64; 2]], c: usize, k: usize) -> [Jet; 2] {
    let mut out = [[0.0; 6]; 2];
    for (l, &d) in table.cell_dofs[c].iter().enumerate() {
        let jet = &table.jets[k][l];
        for comp in 0..2 {
            let v = coeffs[d][comp];
            if v != 0.0 {
                for m in 0..6 {
                    out[comp][m] += v * jet[m];
                }
            }
        }
    }
    out
}

/// Jet of the product of two scalar functions.
pub fn jet_product(a: &Jet, b: &Jet) -> Jet {
    [
        a[0] * b[0],
        a[1] * b[0] + a[0] * b[1],
        a[2] * b[0] + a[0] * b[2],
        a[3] * b[0] + 2.0 * a[1] * b[1] + a[0] * b[3],
        a[4] * b[0] + a[1] * b[2] + a[2] * b[1] + a[0] * b[4],
        a[5] * b[0] + 2.0 * a[2] * b[2] + a[0] * b[5],
    ]
}

/// `psi_h` for the chosen strategy, as a full primal coefficient vector.
pub fn psi(adj: &Adjoint, choice: PsiChoice) -> Result<Vec<[f64; 2]>> {
    let ndof = adj.primal.dofs.index.len();
    match choice {
        PsiChoice::Zero => Ok(vec![[0.0; 2]; ndof]),
        PsiChoice::L2Projection => {
            let rule = &adj.primal.rule;
            let test = TestSpace { table: &adj.primal.table, dofs: &adj.primal.dofs };
            let mass = assembly::mass_matrix(rule, test);
            let n = adj.primal.dofs.n();
            let mut rhs = [vec![0.0; n], vec![0.0; n]];
            for c in 0..rule.num_cells() {
                for k in rule.cell_range(c) {
                    let zj = field_jets(&adj.disc.table, &adj.z, c, k);
                    for (l, &d) in adj.primal.table.cell_dofs[c].iter().enumerate() {
                        if let Some(g) = adj.primal.dofs.index[d] {
                            let v = rule.weights[k] * adj.primal.table.jets[k][l][0];
                            rhs[0][g] += v * zj[0][0];
                            rhs[1][g] += v * zj[1][0];
                        }
                    }
                }
            }
            let lu = SparseLu::new(&mass)?;
            let (cx, cy) = (lu.solve(&rhs[0])?, lu.solve(&rhs[1])?);
            let mut out = vec![[0.0; 2]; ndof];
            for (k, &d) in adj.primal.dofs.interior.iter().enumerate() {
                out[d] = [cx[k], cy[k]];
            }
            Ok(out)
        }
    }
}

/// Split `-F(x_h, z_h - psi_h)` over the primal basis functions.
pub fn decompose_residual(adj: &Adjoint, psi: &[[f64; 2]], prm: &EggParams) -> ResidualDecomposition {
    let rule = &adj.primal.rule;
    let ndof = adj.primal.dofs.index.len();
    let parts = crate::par::map(rule.num_cells(), |c| {
        let dofs = &adj.primal.table.cell_dofs[c];
        let mut r = vec![0.0; dofs.len()];
        let mut w = vec![0.0; dofs.len()];
        for k in rule.cell_range(c) {
            let mj = map_jet_at(&adj.primal.table, &adj.x, c, k);
            let ps = assembly::PointState::new(&mj, None, prm);
            let zj = field_jets(&adj.disc.table, &adj.z, c, k);
            let pj = field_jets(&adj.primal.table, psi, c, k);
            let wt = rule.weights[k];
            for (l, jet) in adj.primal.table.jets[k].iter().enumerate() {
                w[l] += wt * jet[0];
                for comp in 0..2 {
                    let mut e = zj[comp];
                    for m in 0..6 {
                        e[m] -= pj[comp][m];
                    }
                    r[l] -= wt * ps.tau(prm.tau, &jet_product(jet, &e)) * ps.ah[comp];
                }
            }
        }
        dofs.iter().copied().zip(r.into_iter().zip(w)).collect::<Vec<_>>()
    });
    let mut r = vec![0.0; ndof];
    let mut w = vec![0.0; ndof];
    for part in parts {
        for (d, (ri, wi)) in part {
            r[d] += ri;
            w[d] += wi;
        }
    }
    let r_weighted = r.iter().zip(&w).map(|(a, b)| a / b).collect();
    let estimate = r.iter().sum();
    ResidualDecomposition { r, w, r_weighted, estimate }
}

/// Indices with `|r~_i| >= beta max |r~|`.
pub fn mark(dec: &ResidualDecomposition, beta: f64, positive_only: bool) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    let vals: Vec<f64> = dec
        .r_weighted
        .iter()
        .map(|&v| if positive_only && v < 0.0 { 0.0 } else { v.abs() })
        .collect();
    let max = vals.iter().fold(0.0f64, |m, v| m.max(*v));
    if max == 0.0 {
        return Ok(Vec::new());
    }
    Ok(vals.iter().enumerate().filter(|(_, v)| **v > 0.0 && **v >= beta * max).map(|(i, _)| i).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub goal: GoalKind,
    pub beta: f64,
    pub positive_only: bool,
    pub max_rounds: usize,
    pub psi: PsiChoice,
    pub adjoint: AdjointChoice,
    /// Stop the Winslow goal once `|estimate| <= winslow_rel_tol * L_W(x_h)`.
    pub winslow_rel_tol: f64,
    pub solver: SolverConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            goal: GoalKind::Bijectivity,
            beta: 0.2,
            positive_only: false,
            max_rounds: 6,
            psi: PsiChoice::L2Projection,
            adjoint: AdjointChoice::KRefined,
            winslow_rel_tol: 1e-3,
            solver: SolverConfig { fallback_picard: true, ..SolverConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub num_dofs: usize,
    pub num_cells: usize,
    pub max_level: usize,
    pub solve_converged: bool,
    pub solve_iterations: usize,
    pub final_residual: f64,
    pub min_det: f64,
    pub num_negative: usize,
    pub goal_value: f64,
    pub estimate: Option<f64>,
    pub marked: Vec<usize>,
    pub refine: Option<RefineInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub goal: GoalKind,
    pub beta: f64,
    pub rounds: Vec<RoundReport>,
    pub success: bool,
    pub final_dofs: usize,
    pub diagnostic: Option<String>,
    pub warnings: Vec<String>,
}

/// Replace the boundary coefficients of a prolonged map by the trace projection on its space.
pub fn reimpose_boundary(x: &GeometryMap, boundary: &dyn BoundaryCurves) -> Result<GeometryMap> {
    let (bc, _) = trace_project(&x.space, boundary)?;
    let mut c = x.coeffs.clone();
    for d in x.space.boundary_dofs() {
        c[d] = bc[d];
    }
    GeometryMap::new(x.space.clone(), c)
}

/// Solve, estimate, mark and refine until the goal is met.
pub fn adapt_loop(
    x0: &GeometryMap,
    boundary: &dyn BoundaryCurves,
    cfg: &AdaptConfig,
) -> Result<(GeometryMap, AdaptReport, Vec<SolveReport>)> {
    let mut x = x0.clone();
    let mut rounds = Vec::new();
    let mut solves = Vec::new();
    let prm = cfg.solver.params();
    let mut success = false;
    let mut diagnostic = None;
    let mut warnings = Vec::new();
    let mut prev_estimate: Option<f64> = None;
    for round in 0..=cfg.max_rounds {
        let disc = Disc::new(x.space.clone());
        let (xs, rep) = solvers::solve(&disc, &x, &cfg.solver, None)?;
        x = xs;
        let negative = negative_points(&disc, &x.coeffs);
        let goal = Goal::at(cfg.goal, &disc, &x.coeffs);
        let goal_value = match goal.value(&disc, &x.coeffs) {
            Ok(v) => v,
            Err(_) => f64::NAN,
        };
        let mut rr = RoundReport {
            round,
            num_dofs: x.space.num_dofs(),
            num_cells: x.space.num_cells(),
            max_level: x.space.mesh().num_levels() - 1,
            solve_converged: rep.converged,
            solve_iterations: rep.iterations,
            final_residual: rep.final_residual,
            min_det: rep.min_det,
            num_negative: negative.len(),
            goal_value,
            estimate: None,
            marked: Vec::new(),
            refine: None,
        };
        solves.push(rep);
        if cfg.goal == GoalKind::Bijectivity && negative.is_empty() {
            success = true;
            rounds.push(rr);
            break;
        }
        if cfg.goal == GoalKind::Winslow && !negative.is_empty() {
            diagnostic = Some("winslow goal needs a bijective solution".into());
            rounds.push(rr);
            break;
        }
        let adj = solve_adjoint(&disc, &x.coeffs, &goal, cfg.adjoint, &prm)?;
        let psi = psi(&adj, cfg.psi)?;
        let dec = decompose_residual(&adj, &psi, &prm);
        rr.estimate = Some(dec.estimate);
        if let Some(pe) = prev_estimate {
            if dec.estimate.abs() > 0.95 * pe.abs() {
                warnings.push(format!(
                    "round {round}: refinement ineffective, |estimate| {:.3e} vs {:.3e} in the previous round",
                    dec.estimate.abs(),
                    pe.abs()
                ));
            }
        }
        prev_estimate = Some(dec.estimate);
        if cfg.goal == GoalKind::Winslow && dec.estimate.abs() <= cfg.winslow_rel_tol * goal_value.abs() {
            success = true;
            rounds.push(rr);
            break;
        }
        if round == cfg.max_rounds {
            diagnostic = Some(format!("goal not reached within {} rounds", cfg.max_rounds));
            rounds.push(rr);
            break;
        }
        let marked = mark(&dec, cfg.beta, cfg.positive_only)?;
        if marked.is_empty() {
            diagnostic = Some("no basis function marked".into());
            rounds.push(rr);
            break;
        }
        let (fine, info) = x.space.refine_functions(&marked)?;
        rr.marked = marked;
        let stalled = info.refined_cells == 0;
        rr.refine = Some(info);
        rounds.push(rr);
        if stalled {
            diagnostic = Some("marked functions cannot be refined below the level cap".into());
            break;
        }
        x = reimpose_boundary(&x.prolong(Arc::new(fine))?, boundary)?;
    }
    let report = AdaptReport {
        goal: cfg.goal,
        beta: cfg.beta,
        rounds,
        success,
        final_dofs: x.space.num_dofs(),
        diagnostic,
        warnings,
    };
    Ok((x, report, solves))
}

/// `-F(x_h, z_h - psi_h)` without splitting.
pub fn unsplit_estimate(adj: &Adjoint, psi: &[[f64; 2]], prm: &EggParams) -> f64 {
    let rule = &adj.primal.rule;
    let mut s = 0.0;
    for c in 0..rule.num_cells() {
        for k in rule.cell_range(c) {
            let mj = map_jet_at(&adj.primal.table, &adj.x, c, k);
            let ps = assembly::PointState::new(&mj, None, prm);
            let zj = field_jets(&adj.disc.table, &adj.z, c, k);
            let pj = field_jets(&adj.primal.table, psi, c, k);
            for comp in 0..2 {
                let mut e = zj[comp];
                for m in 0..6 {
                    e[m] -= pj[comp][m];
                }
                s -= rule.weights[k] * ps.tau(prm.tau, &e) * ps.ah[comp];
            }
        }
    }
    s
}

/// `F'(x_h, v, z_h)` for a direction `v` given as adjoint unknowns.
pub fn adjoint_pairing(adj: &Adjoint, v: &[f64], prm: &EggParams) -> f64 {
    let xf = Field { table: &adj.primal.table, coeffs: &adj.x };
    let kv = assembly::gateaux(&adj.primal.rule, xf, adj.disc.test(), adj.disc.test(), prm, None, v);
    linalg::dot(&adj.disc.get_interior(&adj.z), &kv)
}
