//! Constrained minimization: log barrier for inequalities, augmented
//! Lagrangian for equalities, L-BFGS inner solves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf};

/// Sparse rows of a constraint Jacobian.
pub type Rows = Vec<Vec<(usize, f64)>>;

/// Values and Jacobian rows of a constraint block.
#[derive(Clone, Debug, Default)]
pub struct ConstraintEval {
    pub values: Vec<f64>,
    pub rows: Rows,
}

impl ConstraintEval {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, v: f64, row: Vec<(usize, f64)>) {
        self.values.push(v);
        self.rows.push(row);
    }

    pub fn append(&mut self, other: ConstraintEval) {
        self.values.extend(other.values);
        self.rows.extend(other.rows);
    }

    /// `sum_i w_i grad c_i` added to `out`.
    fn add_transpose(&self, w: &[f64], out: &mut [f64]) {
        for (row, wi) in self.rows.iter().zip(w) {
            for &(j, v) in row {
                out[j] += wi * v;
            }
        }
    }
}

/// `min f(x)` s.t. `c(x) >= 0`, `h(x) = 0`; the start must satisfy `c > 0`.
pub trait Problem {
    fn dim(&self) -> usize;
    fn objective(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn inequalities(&self, x: &[f64]) -> Result<ConstraintEval>;
    fn equalities(&self, _x: &[f64]) -> Result<ConstraintEval> {
        Ok(ConstraintEval::default())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kkt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Initial barrier weight relative to `1 + |f(x0)|`.
    pub mu0: f64,
    pub mu_factor: f64,
    pub rho0: f64,
    pub memory: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { kkt_tol: 1e-6, max_outer: 40, max_inner: 400, mu0: 1e-2, mu_factor: 0.2, rho0: 10.0, memory: 12 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimRecord {
    pub outer: usize,
    pub objective: f64,
    pub mu: f64,
    pub kkt: f64,
    pub feasibility: f64,
    pub min_inequality: f64,
    pub inner_iters: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimReport {
    pub converged: bool,
    pub objective_start: f64,
    pub objective: f64,
    pub kkt: f64,
    pub accepted_iterates: usize,
    /// Every accepted iterate had `c > 0`.
    pub iterates_feasible: bool,
    pub history: Vec<OptimRecord>,
    pub warnings: Vec<String>,
}

struct Merit<'a, P: Problem> {
    p: &'a P,
    mu: f64,
    lambda: Vec<f64>,
    rho: f64,
}

struct MeritEval {
    value: f64,
    grad: Vec<f64>,
    f: f64,
    fgrad: Vec<f64>,
    ineq: ConstraintEval,
    eq: ConstraintEval,
}

impl<P: Problem> Merit<'_, P> {
    /// `None` outside the strict interior of the inequalities.
    fn eval(&self, x: &[f64]) -> Result<Option<MeritEval>> {
        let ineq = self.p.inequalities(x)?;
        if ineq.values.iter().any(|c| !(*c > 0.0)) {
            return Ok(None);
        }
        let (f, fgrad) = match self.p.objective(x) {
            Ok(v) => v,
            Err(Error::NotBijective(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if !f.is_finite() {
            return Ok(None);
        }
        let eq = self.p.equalities(x)?;
        let mut value = f - self.mu * ineq.values.iter().map(|c| c.ln()).sum::<f64>();
        let mut grad = fgrad.clone();
        let z: Vec<f64> = ineq.values.iter().map(|c| -self.mu / c).collect();
        ineq.add_transpose(&z, &mut grad);
        let w: Vec<f64> = eq.values.iter().zip(&self.lambda).map(|(h, l)| l + self.rho * h).collect();
        value += eq.values.iter().zip(&self.lambda).map(|(h, l)| l * h + 0.5 * self.rho * h * h).sum::<f64>();
        eq.add_transpose(&w, &mut grad);
        Ok(Some(MeritEval { value, grad, f, fgrad, ineq, eq }))
    }
}

/// Scaled first-order optimality of the current barrier iterate.
fn kkt_measure(m: &MeritEval, mu: f64, lambda: &[f64], rho: f64) -> (f64, f64) {
    let mut r = m.fgrad.clone();
    let z: Vec<f64> = m.ineq.values.iter().map(|c| -mu / c).collect();
    m.ineq.add_transpose(&z, &mut r);
    let w: Vec<f64> = m.eq.values.iter().zip(lambda).map(|(h, l)| l + rho * h).collect();
    m.eq.add_transpose(&w, &mut r);
    let scale = 1.0 + norm_inf(&m.fgrad);
    let stat = norm_inf(&r) / scale;
    let feas = norm_inf(&m.eq.values);
    (stat.max(mu / (1.0 + m.f.abs())), feas)
}

/// Minimize `p` from the strictly feasible `x0`.
pub fn minimize<P: Problem>(p: &P, x0: &[f64], cfg: &OptimConfig) -> Result<(Vec<f64>, OptimReport)> {
    let ineq0 = p.inequalities(x0)?;
    if let Some((i, c)) = ineq0.values.iter().enumerate().find(|(_, c)| !(**c > 0.0)) {
        return Err(Error::InvalidArgument(format!("start violates inequality {i} (value {c:e})")));
    }
    let (f0, g0) = p.objective(x0)?;
    let eq0 = p.equalities(x0)?;
    let n_eq = eq0.len();
    let g0n = norm_inf(&g0);
    if g0n / (1.0 + g0n) <= cfg.kkt_tol && norm_inf(&eq0.values) <= cfg.kkt_tol {
        let rep = OptimReport {
            converged: true,
            objective_start: f0,
            objective: f0,
            kkt: g0n / (1.0 + g0n),
            accepted_iterates: 0,
            iterates_feasible: true,
            history: Vec::new(),
            warnings: Vec::new(),
        };
        return Ok((x0.to_vec(), rep));
    }
    let mut merit = Merit { p, mu: cfg.mu0 * (1.0 + f0.abs()), lambda: vec![0.0; n_eq], rho: cfg.rho0 };
    let mut x = x0.to_vec();
    let mut rep = OptimReport {
        converged: false,
        objective_start: f0,
        objective: f0,
        kkt: f64::INFINITY,
        accepted_iterates: 0,
        iterates_feasible: true,
        history: Vec::new(),
        warnings: Vec::new(),
    };
    let mut prev_feas = f64::INFINITY;
    let mut prev_f = f64::INFINITY;
    let mut flat = 0;
    for outer in 0..cfg.max_outer {
        let tol_inner = (0.1 * merit.mu / (1.0 + f0.abs())).max(0.1 * cfg.kkt_tol);
        let (xn, m, its) = lbfgs(&merit, &x, tol_inner, cfg, &mut rep)?;
        x = xn;
        let (kkt, feas) = kkt_measure(&m, merit.mu, &merit.lambda, merit.rho);
        rep.objective = m.f;
        rep.kkt = kkt.max(feas);
        rep.history.push(OptimRecord {
            outer,
            objective: m.f,
            mu: merit.mu,
            kkt,
            feasibility: feas,
            min_inequality: m.ineq.values.iter().copied().fold(f64::INFINITY, f64::min),
            inner_iters: its,
        });
        if kkt <= cfg.kkt_tol && feas <= cfg.kkt_tol {
            rep.converged = true;
            break;
        }
        let floor = 0.1 * cfg.kkt_tol;
        if merit.mu <= floor && feas <= cfg.kkt_tol && (prev_f - m.f).abs() <= 1e-9 * (1.0 + m.f.abs()) {
            flat += 1;
        } else {
            flat = 0;
        }
        prev_f = m.f;
        if flat >= 3 {
            rep.warnings.push(format!(
                "objective stalled at the smallest barrier weight with scaled KKT residual {:.3e}",
                rep.kkt
            ));
            break;
        }
        for (l, h) in merit.lambda.iter_mut().zip(&m.eq.values) {
            *l += merit.rho * h;
        }
        if feas > 0.25 * prev_feas {
            merit.rho *= 10.0;
        }
        prev_feas = feas;
        if m.ineq.is_empty() {
            merit.mu = 0.0;
        } else {
            merit.mu = (merit.mu * cfg.mu_factor).max(0.1 * cfg.kkt_tol);
        }
    }
    if !rep.converged && rep.warnings.is_empty() {
        rep.warnings.push(format!(
            "iteration cap reached with scaled KKT residual {:.3e}; returning the last feasible iterate",
            rep.kkt
        ));
    }
    Ok((x, rep))
}

/// Limited-memory BFGS on the merit function; steps leaving the strict
/// interior are rejected by backtracking.
fn lbfgs<P: Problem>(
    merit: &Merit<'_, P>,
    x0: &[f64],
    tol: f64,
    cfg: &OptimConfig,
    rep: &mut OptimReport,
) -> Result<(Vec<f64>, MeritEval, usize)> {
    let mut x = x0.to_vec();
    let mut m = merit.eval(&x)?.ok_or_else(|| Error::NotConverged("optimizer iterate left the feasible set".into()))?;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut its = 0;
    while its < cfg.max_inner {
        let scale = 1.0 + norm_inf(&m.fgrad);
        if norm_inf(&m.grad) / scale <= tol {
            break;
        }
        its += 1;
        // two-loop recursion
        let mut d = m.grad.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &d);
            crate::linalg::axpy(&mut d, -alpha[i], &y_hist[i]);
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / (1.0 + norm_inf(&m.grad))
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let b = rho * dot(&y_hist[i], &d);
            crate::linalg::axpy(&mut d, alpha[i] - b, &s_hist[i]);
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&d, &m.grad);
        if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = m.grad.iter().map(|g| -g / (1.0 + norm_inf(&m.grad))).collect();
            slope = dot(&d, &m.grad);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Some(mt) = merit.eval(&xt)? {
                if mt.value <= m.value + 1e-4 * t * slope {
                    accepted = Some((xt, mt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, mn)) = accepted else {
            break;
        };
        rep.accepted_iterates += 1;
        if mn.ineq.values.iter().any(|c| *c <= 0.0) {
            rep.iterates_feasible = false;
        }
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = mn.grad.iter().zip(&m.grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let stalled = (m.value - mn.value).abs() <= 1e-15 * (1.0 + m.value.abs());
        x = xn;
        m = mn;
        if stalled {
            break;
        }
    }
    Ok((x, m, its))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock inside the disc `x^2 + y^2 <= 2.5`.
    struct Rosen;

    impl Problem for Rosen {
        fn dim(&self) -> usize {
            2
        }
        fn objective(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
        }
        fn inequalities(&self, x: &[f64]) -> Result<ConstraintEval> {
            let mut c = ConstraintEval::default();
            c.push(2.5 - x[0] * x[0] - x[1] * x[1], vec![(0, -2.0 * x[0]), (1, -2.0 * x[1])]);
            Ok(c)
        }
    }

    #[test]
    fn rosenbrock_with_inactive_constraint() {
        let (x, rep) = minimize(&Rosen, &[-0.5, 0.5], &OptimConfig::default()).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3, "{x:?}");
        assert!(rep.iterates_feasible);
    }

    /// `min x + y` on the unit disc with `x = y` imposed as an equality.
    struct Disc;

    impl Problem for Disc {
        fn dim(&self) -> usize {
            2
        }
        fn objective(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((x[0] + x[1], vec![1.0, 1.0]))
        }
        fn inequalities(&self, x: &[f64]) -> Result<ConstraintEval> {
            let mut c = ConstraintEval::default();
            c.push(1.0 - x[0] * x[0] - x[1] * x[1], vec![(0, -2.0 * x[0]), (1, -2.0 * x[1])]);
            Ok(c)
        }
        fn equalities(&self, x: &[f64]) -> Result<ConstraintEval> {
            let mut c = ConstraintEval::default();
            c.push(x[0] - x[1], vec![(0, 1.0), (1, -1.0)]);
            Ok(c)
        }
    }

    #[test]
    fn active_constraint_and_equality() {
        let (x, rep) = minimize(&Disc, &[0.3, -0.2], &OptimConfig::default()).unwrap();
        let r = -std::f64::consts::FRAC_1_SQRT_2;
        assert!((x[0] - r).abs() < 1e-4 && (x[1] - r).abs() < 1e-4, "{x:?} {rep:?}");
        assert!(rep.converged);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        assert!(minimize(&Disc, &[2.0, 0.0], &OptimConfig::default()).is_err());
    }
}
