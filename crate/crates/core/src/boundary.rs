//! Boundary curves of the physical domain.
//!
//! Internally every side is parameterized along the coordinate direction of
//! the unit square: south `(t, 0)`, north `(t, 1)`, west `(0, t)`, east
//! `(1, t)`. Files store the sides counterclockwise; north and west are
//! reversed on load and save.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splinecore::KnotVector;

pub const CORNER_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    South,
    East,
    North,
    West,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::South, Side::East, Side::North, Side::West];

    pub fn name(self) -> &'static str {
        match self {
            Side::South => "south",
            Side::East => "east",
            Side::North => "north",
            Side::West => "west",
        }
    }

    /// Parametric point of the unit square at curve parameter `t`.
    pub fn point(self, t: f64) -> [f64; 2] {
        match self {
            Side::South => [t, 0.0],
            Side::North => [t, 1.0],
            Side::West => [0.0, t],
            Side::East => [1.0, t],
        }
    }
}

/// Four boundary curves, internally oriented.
pub trait BoundaryCurves: Sync + Send {
    fn eval(&self, side: Side, t: f64) -> [f64; 2];
}

/// Planar polynomial spline curve on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineCurve {
    pub kv: KnotVector,
    pub cps: Vec<[f64; 2]>,
}

impl SplineCurve {
    pub fn new(degree: usize, knots: Vec<f64>, cps: Vec<[f64; 2]>) -> Result<Self> {
        let kv = KnotVector::new(degree, knots)?;
        if kv.num_basis() != cps.len() {
            return Err(Error::InvalidArgument(format!(
                "{} control points for {} basis functions",
                cps.len(),
                kv.num_basis()
            )));
        }
        Ok(Self { kv, cps })
    }

    pub fn eval(&self, t: f64) -> [f64; 2] {
        self.eval_derivs(t).0
    }

    pub fn eval_derivs(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let t = t.clamp(0.0, 1.0);
        let b = self.kv.eval_basis(t, 1).expect("parameter clamped to [0, 1]");
        let mut x = [0.0; 2];
        let mut d = [0.0; 2];
        for k in 0..=self.kv.degree() {
            let c = self.cps[b.first() + k];
            for i in 0..2 {
                x[i] += b.row(0)[k] * c[i];
                d[i] += b.row(1)[k] * c[i];
            }
        }
        (x, d)
    }

    /// Same curve traversed backwards.
    pub fn reversed(&self) -> Self {
        let knots: Vec<f64> = self.kv.knots().iter().rev().map(|t| 1.0 - t).collect();
        let cps = self.cps.iter().rev().copied().collect();
        Self { kv: KnotVector::new(self.kv.degree(), knots).expect("reversal keeps validity"), cps }
    }

    /// Least-squares cubic fit of a parametric curve with `n_el` uniform elements.
    pub fn fit<F: Fn(f64) -> [f64; 2]>(f: F, degree: usize, n_el: usize) -> Result<Self> {
        let kv = KnotVector::uniform(degree, n_el, degree - 1)?;
        let n = kv.num_basis();
        let (gp, gw) = crate::quadrature::gauss_legendre(degree + 4);
        let mut trip = Vec::new();
        let mut rhs = vec![[0.0; 2]; n];
        for e in 0..n_el {
            let (a, b) = (kv.breakpoints()[e], kv.breakpoints()[e + 1]);
            for (x, w) in gp.iter().zip(&gw) {
                let t = a + (b - a) * x;
                let wt = w * (b - a);
                let be = kv.eval_basis_at_span(kv.element_span(e), t, 0);
                let ft = f(t);
                for k in 0..=degree {
                    let gk = be.first() + k;
                    for l in 0..=degree {
                        trip.push((gk, be.first() + l, wt * be.row(0)[k] * be.row(0)[l]));
                    }
                    for i in 0..2 {
                        rhs[gk][i] += wt * be.row(0)[k] * ft[i];
                    }
                }
            }
        }
        // Interpolate the endpoints exactly so corners stay closed.
        let m = crate::linalg::CsrMatrix::from_triplets(n, n, &trip);
        let mut trip2: Vec<(usize, usize, f64)> =
            m.triplets().into_iter().filter(|&(r, _, _)| r != 0 && r != n - 1).collect();
        trip2.push((0, 0, 1.0));
        trip2.push((n - 1, n - 1, 1.0));
        let (f0, f1) = (f(0.0), f(1.0));
        rhs[0] = f0;
        rhs[n - 1] = f1;
        let lu = crate::linalg::SparseLu::new(&crate::linalg::CsrMatrix::from_triplets(n, n, &trip2))?;
        let cx = lu.solve(&rhs.iter().map(|r| r[0]).collect::<Vec<_>>())?;
        let cy = lu.solve(&rhs.iter().map(|r| r[1]).collect::<Vec<_>>())?;
        Ok(Self { kv, cps: cx.into_iter().zip(cy).map(|(a, b)| [a, b]).collect() })
    }
}

/// Boundary given by four spline curves (internal orientation).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData {
    pub south: SplineCurve,
    pub east: SplineCurve,
    pub north: SplineCurve,
    pub west: SplineCurve,
}

impl BoundaryData {
    pub fn new(south: SplineCurve, east: SplineCurve, north: SplineCurve, west: SplineCurve) -> Result<Self> {
        let b = Self { south, east, north, west };
        b.check_corners()?;
        Ok(b)
    }

    pub fn side(&self, s: Side) -> &SplineCurve {
        match s {
            Side::South => &self.south,
            Side::East => &self.east,
            Side::North => &self.north,
            Side::West => &self.west,
        }
    }

    pub fn check_corners(&self) -> Result<()> {
        let checks = [
            ("south-west", self.south.eval(0.0), self.west.eval(0.0)),
            ("south-east", self.south.eval(1.0), self.east.eval(0.0)),
            ("north-east", self.north.eval(1.0), self.east.eval(1.0)),
            ("north-west", self.north.eval(0.0), self.west.eval(1.0)),
        ];
        for (name, a, b) in checks {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if d > CORNER_TOL {
                return Err(Error::CornerMismatch { corner: name.into(), distance: d });
            }
        }
        Ok(())
    }

    /// Fit each side of an arbitrary boundary with a spline.
    pub fn fit(curves: &dyn BoundaryCurves, degree: usize, n_el: usize) -> Result<Self> {
        let f = |s: Side| SplineCurve::fit(|t| curves.eval(s, t), degree, n_el);
        Self::new(f(Side::South)?, f(Side::East)?, f(Side::North)?, f(Side::West)?)
    }

    /// Apply an affine map to all control points.
    pub fn transformed(&self, m: [[f64; 2]; 2], b: [f64; 2]) -> Self {
        let tr = |c: &SplineCurve| SplineCurve {
            kv: c.kv.clone(),
            cps: c
                .cps
                .iter()
                .map(|p| [m[0][0] * p[0] + m[0][1] * p[1] + b[0], m[1][0] * p[0] + m[1][1] * p[1] + b[1]])
                .collect(),
        };
        Self { south: tr(&self.south), east: tr(&self.east), north: tr(&self.north), west: tr(&self.west) }
    }

    /// Straight-sided quadrilateral with corners `sw, se, ne, nw`.
    pub fn quad(sw: [f64; 2], se: [f64; 2], ne: [f64; 2], nw: [f64; 2]) -> Self {
        let line = |a: [f64; 2], b: [f64; 2]| SplineCurve {
            kv: KnotVector::uniform(1, 1, 0).expect("linear knot vector"),
            cps: vec![a, b],
        };
        Self { south: line(sw, se), east: line(se, ne), north: line(nw, ne), west: line(sw, nw) }
    }
}

impl BoundaryCurves for BoundaryData {
    fn eval(&self, side: Side, t: f64) -> [f64; 2] {
        self.side(side).eval(t)
    }
}

/// Exact quarter annulus `1 <= r <= 2`, parameterized so that the inversely
/// harmonic map is `R(eta) (sin(xi pi/2), cos(xi pi/2))` with `R = 2^eta`.
/// The angle runs clockwise from the y-axis so the map preserves orientation.
#[derive(Clone, Copy, Debug, Default)]
pub struct AnnulusSector;

impl AnnulusSector {
    pub fn exact(xi: f64, eta: f64) -> [f64; 2] {
        let r = (eta * std::f64::consts::LN_2).exp();
        let th = xi * std::f64::consts::FRAC_PI_2;
        [r * th.sin(), r * th.cos()]
    }
}

impl BoundaryCurves for AnnulusSector {
    fn eval(&self, side: Side, t: f64) -> [f64; 2] {
        let p = side.point(t);
        Self::exact(p[0], p[1])
    }
}
