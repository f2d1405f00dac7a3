//! Nonlinear solvers for the discrete grid generation equations.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{self, min_det, ControlData, Disc, EggParams, Tau, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::linalg::{self, CsrMatrix, SparseLu};
use crate::thb::GeometryMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Newton,
    NewtonKrylov,
    Ptc,
    Picard,
    DirectWinslow,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "newton" => Ok(Method::Newton),
            "newton-krylov" => Ok(Method::NewtonKrylov),
            "ptc" => Ok(Method::Ptc),
            "picard" => Ok(Method::Picard),
            "direct-winslow" => Ok(Method::DirectWinslow),
            _ => Err(Error::InvalidArgument(format!(
                "unknown method '{s}' (expected newton, newton-krylov, ptc, picard or direct-winslow)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineSearch {
    None,
    Backtracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub tau: Tau,
    pub mu: f64,
    /// Regularization of the `A` matrix denominator.
    pub eps: f64,
    /// Relative to `||F(x0)|| + 1`.
    pub tol_residual: f64,
    /// Coefficient increment, max-norm.
    pub tol_increment: f64,
    pub max_iters: usize,
    pub eps_fd: f64,
    pub dt0: f64,
    pub linesearch: LineSearch,
    /// Newton–Krylov products from the exact linearization instead of differences.
    pub exact_products: bool,
    pub krylov_rtol: f64,
    /// Retry with Picard (`mu >= 1e-2`) when Newton does not converge.
    pub fallback_picard: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Newton,
            tau: Tau::Id,
            mu: 0.0,
            eps: DEFAULT_EPS,
            tol_residual: 1e-8,
            tol_increment: 1e-10,
            max_iters: 50,
            eps_fd: 1e-7,
            dt0: 1.0,
            linesearch: LineSearch::Backtracking,
            exact_products: false,
            krylov_rtol: 1e-3,
            fallback_picard: false,
        }
    }
}

impl SolverConfig {
    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn params(&self) -> EggParams {
        EggParams { tau: self.tau, mu: self.mu, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("tol_residual", self.tol_residual),
            ("tol_increment", self.tol_increment),
            ("eps_fd", self.eps_fd),
            ("dt0", self.dt0),
            ("krylov_rtol", self.krylov_rtol),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.mu < 0.0 || self.eps < 0.0 {
            return Err(Error::Config("mu and eps must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub residual: f64,
    pub increment: f64,
    /// Line-search step, or the time step for PTC.
    pub step: f64,
    pub linear_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    pub history: Vec<IterRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub min_det: f64,
    pub num_dofs: usize,
    /// Not serialized, so reports of identical runs are byte-identical.
    #[serde(skip_serializing, default)]
    pub wall_time_s: f64,
    pub notes: Vec<String>,
}

impl SolveReport {
    fn new(method: Method, disc: &Disc) -> Self {
        Self {
            method,
            history: Vec::new(),
            converged: false,
            iterations: 0,
            final_residual: f64::NAN,
            min_det: f64::NAN,
            num_dofs: disc.space.num_dofs(),
            wall_time_s: 0.0,
            notes: Vec::new(),
        }
    }

    fn finish(&mut self, disc: &Disc, coeffs: &[[f64; 2]], start: Instant) {
        self.min_det = min_det(disc, coeffs).0;
        self.iterations = self.history.len().saturating_sub(1);
        self.final_residual = self.history.last().map_or(f64::NAN, |r| r.residual);
        self.wall_time_s = start.elapsed().as_secs_f64();
    }

    /// Residual history as CSV.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iteration,residual,increment,step,linear_iters\n");
        for (k, r) in self.history.iter().enumerate() {
            s.push_str(&format!("{k},{:e},{:e},{:e},{}\n", r.residual, r.increment, r.step, r.linear_iters));
        }
        s
    }
}

fn check_space(disc: &Disc, x0: &GeometryMap, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if x0.coeffs.len() != disc.space.num_dofs() {
        return Err(Error::InvalidArgument("initial map does not live on the solver space".into()));
    }
    if cfg.tau != Tau::Id && disc.space.regularity() < 1 {
        return Err(Error::InvalidArgument("tau = div or ls needs C1 test functions (regularity >= 1)".into()));
    }
    Ok(())
}

/// Dispatch on `cfg.method`, with the optional Picard fallback.
pub fn solve(disc: &Disc, x0: &GeometryMap, cfg: &SolverConfig, ctrl: Option<&ControlData>) -> Result<(GeometryMap, SolveReport)> {
    let (x, mut rep) = match cfg.method {
        Method::Newton | Method::NewtonKrylov => newton_solve(disc, x0, cfg, ctrl)?,
        Method::Ptc => ptc_solve(disc, x0, cfg, ctrl)?,
        Method::Picard => picard_solve(disc, x0, cfg, ctrl)?,
        Method::DirectWinslow => direct_winslow(disc, x0, cfg)?,
    };
    if !rep.converged && cfg.fallback_picard && matches!(cfg.method, Method::Newton | Method::NewtonKrylov) {
        let pc = SolverConfig { method: Method::Picard, mu: cfg.mu.max(1e-2), ..cfg.clone() };
        let (xp, mut rp) = picard_solve(disc, x0, &pc, ctrl)?;
        rp.notes.splice(0..0, rep.notes.drain(..));
        rp.notes.push(format!("newton did not converge; fell back to picard with mu = {}", pc.mu));
        return Ok((xp, rp));
    }
    Ok((x, rep))
}

fn with_unknowns(disc: &Disc, base: &[[f64; 2]], u: &[f64]) -> Vec<[f64; 2]> {
    let mut c = base.to_vec();
    disc.set_interior(&mut c, u);
    c
}

/// Newton (assembled) or Newton–Krylov iteration with backtracking.
pub fn newton_solve(
    disc: &Disc,
    x0: &GeometryMap,
    cfg: &SolverConfig,
    ctrl: Option<&ControlData>,
) -> Result<(GeometryMap, SolveReport)> {
    check_space(disc, x0, cfg)?;
    let start = Instant::now();
    let prm = cfg.params();
    let mut rep = SolveReport::new(cfg.method, disc);
    let mut coeffs = x0.coeffs.clone();
    let mut u = disc.get_interior(&coeffs);
    let mut f = disc.residual(&coeffs, &prm, ctrl);
    let mut fnorm = linalg::norm2(&f);
    let tol = cfg.tol_residual * (fnorm + 1.0);
    rep.history.push(IterRecord { residual: fnorm, increment: 0.0, step: 0.0, linear_iters: 0 });
    for _ in 0..cfg.max_iters {
        if fnorm <= tol {
            rep.converged = true;
            break;
        }
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let (delta, lin_its) = match newton_direction(disc, &coeffs, &u, &rhs, cfg, ctrl, &mut rep.notes) {
            Ok(d) => d,
            Err(e) => {
                rep.notes.push(format!("linear solve failed: {e}"));
                break;
            }
        };
        let Some((kappa, trial_u, trial_c, trial_f, trial_n)) =
            line_search(disc, &coeffs, &u, &delta, fnorm, cfg, |c| disc.residual(c, &prm, ctrl))
        else {
            rep.notes.push("line search found no decrease".into());
            break;
        };
        let inc = kappa * linalg::norm_inf(&delta);
        (u, coeffs, f, fnorm) = (trial_u, trial_c, trial_f, trial_n);
        rep.history.push(IterRecord { residual: fnorm, increment: inc, step: kappa, linear_iters: lin_its });
        if fnorm <= tol {
            rep.converged = true;
            break;
        }
    }
    rep.finish(disc, &coeffs, start);
    Ok((GeometryMap::new(disc.space.clone(), coeffs)?, rep))
}

fn newton_direction(
    disc: &Disc,
    coeffs: &[[f64; 2]],
    u: &[f64],
    rhs: &[f64],
    cfg: &SolverConfig,
    ctrl: Option<&ControlData>,
    notes: &mut Vec<String>,
) -> Result<(Vec<f64>, usize)> {
    let prm = cfg.params();
    if cfg.method == Method::NewtonKrylov {
        let f0 = disc.residual(coeffs, &prm, ctrl);
        let unorm = linalg::norm_inf(u);
        let op = |v: &[f64]| -> Vec<f64> {
            if cfg.exact_products {
                return disc.gateaux_exact(coeffs, &prm, ctrl, v);
            }
            let vn = linalg::norm_inf(v);
            if vn == 0.0 {
                return vec![0.0; v.len()];
            }
            let e = cfg.eps_fd * (1.0 + unorm) / vn;
            let mut up = u.to_vec();
            linalg::axpy(&mut up, e, v);
            let f1 = disc.residual(&with_unknowns(disc, coeffs, &up), &prm, ctrl);
            f1.iter().zip(&f0).map(|(a, b)| (a - b) / e).collect()
        };
        let n = rhs.len();
        let g = linalg::gmres(op, rhs, None, cfg.krylov_rtol, n.min(80), 10 * n.max(50));
        if g.converged {
            return Ok((g.x, g.iterations));
        }
        notes.push(format!(
            "krylov stagnated at relative residual {:e} after {} iterations; assembled step used",
            g.rel_residual, g.iterations
        ));
    }
    let jac = disc.jacobian(coeffs, &prm, ctrl);
    Ok((SparseLu::new(&jac)?.solve(rhs)?, 0))
}

type Trial = (f64, Vec<f64>, Vec<[f64; 2]>, Vec<f64>, f64);

/// Halve the step until the residual norm decreases.
fn line_search<R>(
    disc: &Disc,
    coeffs: &[[f64; 2]],
    u: &[f64],
    delta: &[f64],
    fnorm: f64,
    cfg: &SolverConfig,
    residual: R,
) -> Option<Trial>
where
    R: Fn(&[[f64; 2]]) -> Vec<f64>,
{
    let mut kappa = 1.0;
    for _ in 0..30 {
        let mut tu = u.to_vec();
        linalg::axpy(&mut tu, kappa, delta);
        let tc = with_unknowns(disc, coeffs, &tu);
        let tf = residual(&tc);
        let tn = linalg::norm2(&tf);
        if cfg.linesearch == LineSearch::None || (tn.is_finite() && tn < fnorm) {
            return Some((kappa, tu, tc, tf, tn));
        }
        kappa *= 0.5;
    }
    None
}

fn block_mass(disc: &Disc) -> CsrMatrix {
    let m = disc.mass_matrix();
    let n = m.n_rows;
    let mut t = m.triplets();
    t.extend(m.triplets().into_iter().map(|(r, c, v)| (r + n, c + n, v)));
    CsrMatrix::from_triplets(2 * n, 2 * n, &t)
}

/// Next PTC time step, capped at `1e12`.
pub fn next_time_step(dt: f64, prev_residual: f64, residual: f64) -> f64 {
    if residual == 0.0 {
        return 1e12;
    }
    (dt * prev_residual / residual).min(1e12)
}

/// Pseudo-transient continuation with `tau = Id`.
///
/// Steps solve `(M / dt - F') d = F`; as `dt` grows the step tends to Newton's.
pub fn ptc_solve(
    disc: &Disc,
    x0: &GeometryMap,
    cfg: &SolverConfig,
    ctrl: Option<&ControlData>,
) -> Result<(GeometryMap, SolveReport)> {
    check_space(disc, x0, cfg)?;
    let start = Instant::now();
    let prm = EggParams { tau: Tau::Id, ..cfg.params() };
    let mut rep = SolveReport::new(Method::Ptc, disc);
    if cfg.tau != Tau::Id {
        rep.notes.push("ptc uses tau = id".into());
    }
    let mass = block_mass(disc);
    let mut coeffs = x0.coeffs.clone();
    let mut u = disc.get_interior(&coeffs);
    let mut f = disc.residual(&coeffs, &prm, ctrl);
    let mut fnorm = linalg::norm2(&f);
    let mut dt = cfg.dt0;
    rep.history.push(IterRecord { residual: fnorm, increment: 0.0, step: dt, linear_iters: 0 });
    for it in 0..cfg.max_iters {
        if fnorm == 0.0 {
            rep.converged = true;
            break;
        }
        let jac = disc.jacobian(&coeffs, &prm, ctrl);
        let mut sys = mass.clone();
        sys.vals.iter_mut().for_each(|v| *v /= dt);
        let sys = sys.add_scaled(&jac, -1.0);
        let delta = match SparseLu::new(&sys).and_then(|lu| lu.solve(&f)) {
            Ok(d) => d,
            Err(e) => {
                rep.notes.push(format!("linear solve failed: {e}"));
                break;
            }
        };
        linalg::axpy(&mut u, 1.0, &delta);
        coeffs = with_unknowns(disc, &coeffs, &u);
        let prev = fnorm;
        f = disc.residual(&coeffs, &prm, ctrl);
        fnorm = linalg::norm2(&f);
        if !fnorm.is_finite() {
            rep.notes.push("residual diverged".into());
            break;
        }
        let inc = linalg::norm_inf(&delta);
        rep.history.push(IterRecord { residual: fnorm, increment: inc, step: dt, linear_iters: 0 });
        if inc <= cfg.tol_increment {
            rep.converged = true;
            break;
        }
        if it + 1 < cfg.max_iters {
            dt = next_time_step(dt, prev, fnorm);
        }
    }
    rep.finish(disc, &coeffs, start);
    Ok((GeometryMap::new(disc.space.clone(), coeffs)?, rep))
}

/// Fixed-point iteration on the linearized system with frozen `A`.
pub fn picard_solve(
    disc: &Disc,
    x0: &GeometryMap,
    cfg: &SolverConfig,
    ctrl: Option<&ControlData>,
) -> Result<(GeometryMap, SolveReport)> {
    check_space(disc, x0, cfg)?;
    let start = Instant::now();
    let prm = cfg.params();
    let mut rep = SolveReport::new(Method::Picard, disc);
    if prm.mu == 0.0 {
        rep.notes.push("warning: picard with mu = 0 may be ill-posed; use mu > 0".into());
    }
    let mut coeffs = x0.coeffs.clone();
    let mut u = disc.get_interior(&coeffs);
    let fnorm = linalg::norm2(&disc.residual(&coeffs, &prm, ctrl));
    rep.history.push(IterRecord { residual: fnorm, increment: 0.0, step: 1.0, linear_iters: 0 });
    for _ in 0..cfg.max_iters {
        let sys = disc.picard_system(&coeffs, &prm, ctrl);
        let un = match sys.solve() {
            Ok(v) => v,
            Err(e) => {
                let hint = if prm.mu == 0.0 { " (try mu > 0)" } else { "" };
                rep.notes.push(format!("linear solve failed: {e}{hint}"));
                break;
            }
        };
        let inc = un.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        u = un;
        coeffs = with_unknowns(disc, &coeffs, &u);
        let fnorm = linalg::norm2(&disc.residual(&coeffs, &prm, ctrl));
        rep.history.push(IterRecord { residual: fnorm, increment: inc, step: 1.0, linear_iters: 0 });
        if !inc.is_finite() {
            rep.notes.push("iteration diverged".into());
            break;
        }
        if inc <= cfg.tol_increment {
            rep.converged = true;
            break;
        }
    }
    rep.finish(disc, &coeffs, start);
    Ok((GeometryMap::new(disc.space.clone(), coeffs)?, rep))
}

/// Newton minimization of the Winslow functional from a bijective start.
pub fn direct_winslow(disc: &Disc, x0: &GeometryMap, cfg: &SolverConfig) -> Result<(GeometryMap, SolveReport)> {
    check_space(disc, x0, cfg)?;
    let start = Instant::now();
    let mut rep = SolveReport::new(Method::DirectWinslow, disc);
    let mut coeffs = x0.coeffs.clone();
    let (mut lw, mut g) = assembly::winslow_value_and_gradient(disc, &coeffs)?;
    let mut u = disc.get_interior(&coeffs);
    let mut gnorm = linalg::norm2(&g);
    let tol = cfg.tol_residual * (gnorm + 1.0);
    rep.history.push(IterRecord { residual: gnorm, increment: 0.0, step: 0.0, linear_iters: 0 });
    let mut shift = 0.0;
    for _ in 0..cfg.max_iters {
        if gnorm <= tol {
            rep.converged = true;
            break;
        }
        let h = assembly::winslow_hessian(disc, &coeffs);
        let scale = h.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        // Shift the Hessian until the Newton direction descends.
        let mut delta = None;
        for _ in 0..40 {
            let hs = if shift > 0.0 { h.add_scaled(&identity(h.n_rows), shift * scale) } else { h.clone() };
            if let Ok(d) = SparseLu::new(&hs).and_then(|lu| lu.solve(&rhs)) {
                if linalg::dot(&d, &g) < 0.0 {
                    delta = Some(d);
                    break;
                }
            }
            shift = if shift == 0.0 { 1e-8 } else { shift * 10.0 };
        }
        let Some(delta) = delta else {
            rep.notes.push("no descent direction; retry with a refined initial map".into());
            break;
        };
        let mut kappa = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut tu = u.clone();
            linalg::axpy(&mut tu, kappa, &delta);
            let tc = with_unknowns(disc, &coeffs, &tu);
            if let Ok((tl, tg)) = assembly::winslow_value_and_gradient(disc, &tc) {
                if tl <= lw {
                    accepted = Some((tu, tc, tl, tg));
                    break;
                }
            }
            kappa *= 0.5;
        }
        let Some((tu, tc, tl, tg)) = accepted else {
            rep.notes.push("line search failed; retry with a refined initial map".into());
            break;
        };
        shift = if kappa == 1.0 { shift * 0.1 } else { shift };
        if shift < 1e-10 {
            shift = 0.0;
        }
        let inc = kappa * linalg::norm_inf(&delta);
        (u, coeffs, lw, g) = (tu, tc, tl, tg);
        gnorm = linalg::norm2(&g);
        rep.history.push(IterRecord { residual: gnorm, increment: inc, step: kappa, linear_iters: 0 });
        if gnorm <= tol || inc <= cfg.tol_increment {
            rep.converged = true;
            break;
        }
    }
    rep.finish(disc, &coeffs, start);
    Ok((GeometryMap::new(disc.space.clone(), coeffs)?, rep))
}

fn identity(n: usize) -> CsrMatrix {
    CsrMatrix::from_triplets(n, n, &(0..n).map(|i| (i, i, 1.0)).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::coons_patch;
    use crate::boundary::{AnnulusSector, BoundaryData};
    use crate::thb::ThbSpace;
    use std::sync::Arc;

    fn square() -> (Disc, GeometryMap) {
        let d = Disc::new(Arc::new(ThbSpace::uniform(3, 2, 4).unwrap()));
        let b = BoundaryData::quad([0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]);
        let x = coons_patch(&d, &b).unwrap();
        (d, x)
    }

    #[test]
    fn time_step_rule() {
        assert_eq!(next_time_step(1.0, 2.0, 1.0), 2.0);
        assert_eq!(next_time_step(1e11, 1.0, 1e-3), 1e12);
    }

    #[test]
    fn identity_is_a_fixed_point_for_every_method() {
        let (d, x) = square();
        for m in [Method::Newton, Method::NewtonKrylov, Method::Ptc, Method::Picard, Method::DirectWinslow] {
            let (y, r) = solve(&d, &x, &SolverConfig::with_method(m), None).unwrap();
            assert!(r.converged, "{m:?}");
            assert!(r.iterations <= 1, "{m:?} {}", r.iterations);
            let d = y.coeffs.iter().zip(&x.coeffs).map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()));
            assert!(d.fold(0.0, f64::max) <= 1e-10, "{m:?}");
        }
    }

    #[test]
    fn annulus_newton_converges() {
        let d = Disc::new(Arc::new(ThbSpace::uniform(3, 2, 8).unwrap()));
        let x0 = coons_patch(&d, &AnnulusSector).unwrap();
        let (x, r) = newton_solve(&d, &x0, &SolverConfig::default(), None).unwrap();
        assert!(r.converged && r.min_det > 0.0);
        assert!(r.final_residual <= 1e-10, "{}", r.final_residual);
        let bd = d.space.boundary_dofs();
        assert!(bd.iter().all(|&i| x.coeffs[i] == x0.coeffs[i]));
    }

    #[test]
    fn config_validation() {
        let c = SolverConfig { tol_residual: 0.0, ..SolverConfig::default() };
        assert!(c.validate().is_err());
        let c = SolverConfig { max_iters: 0, ..SolverConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn div_needs_smoothness() {
        let d = Disc::new(Arc::new(ThbSpace::uniform(2, 0, 3).unwrap()));
        let x = GeometryMap::identity(d.space.clone());
        let cfg = SolverConfig { tau: Tau::Div, ..SolverConfig::default() };
        assert!(solve(&d, &x, &cfg, None).is_err());
    }
}
