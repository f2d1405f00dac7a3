//! Quality functionals of planar maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assembly::{cofactor, det2, Disc, Mat2};
use crate::error::{Error, Result};
use crate::thb::{GeometryMap, MapJet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Functional {
    Winslow,
    Area,
    Length,
    Uniformity,
    Liao,
    ModifiedLiao,
    Orthogonality,
    AreaOrthogonality,
    Eccentricity,
}

impl Functional {
    pub const ALL: [Functional; 9] = [
        Functional::Winslow,
        Functional::Area,
        Functional::Length,
        Functional::Uniformity,
        Functional::Liao,
        Functional::ModifiedLiao,
        Functional::Orthogonality,
        Functional::AreaOrthogonality,
        Functional::Eccentricity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Functional::Winslow => "winslow",
            Functional::Area => "area",
            Functional::Length => "length",
            Functional::Uniformity => "uniformity",
            Functional::Liao => "liao",
            Functional::ModifiedLiao => "modified-liao",
            Functional::Orthogonality => "orthogonality",
            Functional::AreaOrthogonality => "area-orthogonality",
            Functional::Eccentricity => "eccentricity",
        }
    }

    /// Needs `det J > 0`.
    pub fn needs_bijective(self) -> bool {
        matches!(self, Functional::Winslow | Functional::ModifiedLiao)
    }

    /// Depends on second derivatives of the map.
    pub fn uses_hessian(self) -> bool {
        matches!(self, Functional::Uniformity | Functional::Eccentricity)
    }
}

impl std::str::FromStr for Functional {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Functional::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Functional::ALL.iter().map(|f| f.name()).collect();
                Error::InvalidArgument(format!("unknown functional '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Value and partial derivatives `dQ/dJ`, `dQ/dH_c` of a functional at one point.
#[derive(Clone, Copy, Debug, Default)]
pub struct PointDerivative {
    pub value: f64,
    pub d_jac: Mat2,
    pub d_hess: [Mat2; 2],
}

/// Derivatives of `(g11, g12, g22)` with respect to `J`.
fn metric_derivs(j: &Mat2) -> (Mat2, Mat2, Mat2) {
    let mut d11 = [[0.0; 2]; 2];
    let mut d12 = [[0.0; 2]; 2];
    let mut d22 = [[0.0; 2]; 2];
    for c in 0..2 {
        d11[c][0] = 2.0 * j[c][0];
        d22[c][1] = 2.0 * j[c][1];
        d12[c][0] = j[c][1];
        d12[c][1] = j[c][0];
    }
    (d11, d12, d22)
}

fn lin(terms: &[(f64, &Mat2)]) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for (s, m) in terms {
        for a in 0..2 {
            for b in 0..2 {
                out[a][b] += s * m[a][b];
            }
        }
    }
    out
}

pub fn point_derivative(f: Functional, j: &Mat2, h: &[Mat2; 2]) -> PointDerivative {
    let g11 = j[0][0] * j[0][0] + j[1][0] * j[1][0];
    let g12 = j[0][0] * j[0][1] + j[1][0] * j[1][1];
    let g22 = j[0][1] * j[0][1] + j[1][1] * j[1][1];
    let (d11, d12, d22) = metric_derivs(j);
    let det = det2(j);
    let cof = cofactor(j);
    let mut out = PointDerivative::default();
    match f {
        Functional::Winslow | Functional::ModifiedLiao => {
            let q = (g11 + g22) / det;
            let dq = lin(&[(1.0 / det, &d11), (1.0 / det, &d22), (-q / det, &cof)]);
            if f == Functional::Winslow {
                out.value = q;
                out.d_jac = dq;
            } else {
                out.value = q * q;
                out.d_jac = lin(&[(2.0 * q, &dq)]);
            }
        }
        Functional::Area => {
            out.value = det * det;
            out.d_jac = lin(&[(2.0 * det, &cof)]);
        }
        Functional::Length => {
            out.value = g11 + g22;
            out.d_jac = lin(&[(1.0, &d11), (1.0, &d22)]);
        }
        Functional::Uniformity => {
            for c in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        out.value += h[c][a][b] * h[c][a][b];
                        out.d_hess[c][a][b] = 2.0 * h[c][a][b];
                    }
                }
            }
        }
        Functional::Liao => {
            out.value = g11 * g11 + 2.0 * g12 * g12 + g22 * g22;
            out.d_jac = lin(&[(2.0 * g11, &d11), (4.0 * g12, &d12), (2.0 * g22, &d22)]);
        }
        Functional::Orthogonality => {
            out.value = g12 * g12;
            out.d_jac = lin(&[(2.0 * g12, &d12)]);
        }
        Functional::AreaOrthogonality => {
            out.value = g11 * g22;
            out.d_jac = lin(&[(g22, &d11), (g11, &d22)]);
        }
        Functional::Eccentricity => {
            let a = j[0][0] * h[0][0][0] + j[1][0] * h[1][0][0];
            let b = j[0][1] * h[0][1][1] + j[1][1] * h[1][1][1];
            let (u, v) = (a / g11, b / g22);
            out.value = u * u + v * v;
            // d(a/g) = da/g - a dg/g^2
            for c in 0..2 {
                out.d_jac[c][0] += 2.0 * u * (h[c][0][0] / g11);
                out.d_jac[c][1] += 2.0 * v * (h[c][1][1] / g22);
                out.d_hess[c][0][0] = 2.0 * u * j[c][0] / g11;
                out.d_hess[c][1][1] = 2.0 * v * j[c][1] / g22;
            }
            out.d_jac = lin(&[(1.0, &out.d_jac), (-2.0 * u * a / (g11 * g11), &d11), (-2.0 * v * b / (g22 * g22), &d22)]);
        }
    }
    out
}

pub fn point_value(f: Functional, mj: &MapJet) -> f64 {
    point_derivative(f, &mj.jac, &mj.hess).value
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub values: BTreeMap<String, f64>,
    pub min_det: f64,
    pub max_det: f64,
    pub num_negative: usize,
    pub num_dofs: usize,
    /// Parametric rectangle `[xi0, xi1, eta0, eta1]` the integrals were restricted to.
    pub restrict: Option<[f64; 4]>,
}

impl QualityReport {
    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> =
            self.values.iter().map(|(k, v)| (format!("L_{k}"), format!("{v:.6e}"))).collect();
        rows.push(("min det J".into(), format!("{:.6e}", self.min_det)));
        rows.push(("max det J".into(), format!("{:.6e}", self.max_det)));
        rows.push(("negative points".into(), self.num_negative.to_string()));
        rows.push(("DOFs".into(), self.num_dofs.to_string()));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}

/// Minimum `det J` over the rule and the points where it is negative.
pub fn bijectivity_scan(disc: &Disc, coeffs: &[[f64; 2]]) -> (f64, Vec<usize>) {
    let dets = crate::par::map(disc.rule.num_points(), |k| disc.map_jet(coeffs, k).det());
    let min = dets.iter().copied().fold(f64::INFINITY, f64::min);
    (min, dets.iter().enumerate().filter(|(_, d)| **d < 0.0).map(|(k, _)| k).collect())
}

/// Smallest `det J` and number of negative values at `n` uniformly random
/// parametric points drawn from a seeded generator.
pub fn probe_det(x: &GeometryMap, n: usize, seed: u64) -> Result<(f64, usize)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let dets = crate::par::map(n, |k| x.eval(pts[k][0], pts[k][1]).map(|j| j.det()));
    let mut min = f64::INFINITY;
    let mut neg = 0;
    for d in dets {
        let d = d?;
        min = min.min(d);
        neg += usize::from(d < 0.0);
    }
    Ok((min, neg))
}

/// Cells whose center lies in the rectangle; `None` keeps every cell.
fn cell_selection(disc: &Disc, restrict: Option<[f64; 4]>) -> Vec<bool> {
    disc.space
        .cells()
        .iter()
        .map(|c| match restrict {
            None => true,
            Some([x0, x1, y0, y1]) => {
                let [cx, cy] = c.center();
                cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1
            }
        })
        .collect()
}

/// Integrals of the requested functionals over the (restricted) parametric domain.
pub fn evaluate(
    disc: &Disc,
    coeffs: &[[f64; 2]],
    which: &[Functional],
    restrict: Option<[f64; 4]>,
) -> Result<QualityReport> {
    let (min_det, neg) = bijectivity_scan(disc, coeffs);
    let max_det = (0..disc.rule.num_points()).map(|k| disc.map_jet(coeffs, k).det()).fold(f64::NEG_INFINITY, f64::max);
    if which.iter().any(|f| f.needs_bijective()) && min_det <= 0.0 {
        return Err(Error::NotBijective(format!("min det J = {min_det:e}; winslow-type functionals are undefined")));
    }
    if which.contains(&Functional::Uniformity) && disc.space.regularity() < 1 {
        return Err(Error::InvalidArgument("uniformity needs a C1 map (regularity >= 1)".into()));
    }
    let sel = cell_selection(disc, restrict);
    let mjs = disc.map_jets(coeffs);
    let mut values = BTreeMap::new();
    for &f in which {
        let mut s = 0.0;
        for (c, &on) in sel.iter().enumerate() {
            if on {
                for k in disc.rule.cell_range(c) {
                    s += disc.rule.weights[k] * point_value(f, &mjs[k]);
                }
            }
        }
        values.insert(f.name().to_string(), s);
    }
    Ok(QualityReport {
        values,
        min_det,
        max_det,
        num_negative: neg.len(),
        num_dofs: disc.space.num_dofs(),
        restrict,
    })
}

/// Integral of one functional and its gradient with respect to the interior unknowns.
pub fn functional_gradient(disc: &Disc, coeffs: &[[f64; 2]], f: Functional) -> Result<(f64, Vec<f64>)> {
    let n = disc.dofs.n();
    let parts = crate::par::map(disc.rule.num_cells(), |c| {
        let mut val = 0.0;
        let mut g: Vec<(usize, f64)> = Vec::new();
        let dofs = &disc.table.cell_dofs[c];
        let mut loc = vec![[0.0; 2]; dofs.len()];
        let mut bad = false;
        for k in disc.rule.cell_range(c) {
            let mj = disc.map_jet(coeffs, k);
            if f.needs_bijective() && mj.det() <= 0.0 {
                bad = true;
            }
            let pd = point_derivative(f, &mj.jac, &mj.hess);
            let w = disc.rule.weights[k];
            val += w * pd.value;
            for (l, jet) in disc.table.jets[k].iter().enumerate() {
                for comp in 0..2 {
                    let dj = pd.d_jac[comp][0] * jet[1] + pd.d_jac[comp][1] * jet[2];
                    let h = &pd.d_hess[comp];
                    let dh = h[0][0] * jet[3] + (h[0][1] + h[1][0]) * jet[4] + h[1][1] * jet[5];
                    loc[l][comp] += w * (dj + dh);
                }
            }
        }
        for (l, &d) in dofs.iter().enumerate() {
            if let Some(i) = disc.dofs.index[d] {
                g.push((i, loc[l][0]));
                g.push((n + i, loc[l][1]));
            }
        }
        (val, g, bad)
    });
    let mut value = 0.0;
    let mut grad = vec![0.0; 2 * n];
    for (v, g, bad) in parts {
        if bad {
            return Err(Error::NotBijective(format!("{} needs det J > 0", f.name())));
        }
        value += v;
        for (i, x) in g {
            grad[i] += x;
        }
    }
    Ok((value, grad))
}
