//! Univariate B-spline primitives on the unit interval.
//!
//! Knot vectors are open (clamped) on `[0, 1]`. Evaluation follows the
//! right-continuous convention at interior knots and is left-continuous at
//! `xi = 1`, so every parameter value belongs to exactly one element.

use crate::error::{Error, Result};

const KNOT_TOL: f64 = 1e-14;

/// An open knot vector of a given degree on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
    breaks: Vec<f64>,
    /// Knot-span index of the left end of every element.
    element_spans: Vec<usize>,
}

/// Derivatives `0..=max_deriv` of the `p + 1` functions that are nonzero at a point.
#[derive(Clone, Debug)]
pub struct LocalBasisEval {
    pub span: usize,
    pub degree: usize,
    pub max_deriv: usize,
    ders: Vec<f64>,
}

impl LocalBasisEval {
    /// Global index of the first nonzero function.
    pub fn first(&self) -> usize {
        self.span - self.degree
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let n = self.degree + 1;
        &self.ders[k * n..(k + 1) * n]
    }
}

impl KnotVector {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        let p = degree;
        if knots.len() < 2 * (p + 1) {
            return Err(Error::InvalidKnots(format!(
                "need at least {} knots for degree {p}, got {}",
                2 * (p + 1),
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidKnots("knots must be nondecreasing".into()));
        }
        let m = knots.len();
        if knots[..=p].iter().any(|&t| t != 0.0) || knots[m - p - 1..].iter().any(|&t| t != 1.0) {
            return Err(Error::InvalidKnots(
                "knot vector must be open on [0, 1] (first/last p+1 knots equal 0/1)".into(),
            ));
        }
        let mut breaks: Vec<f64> = Vec::new();
        for &t in &knots {
            if breaks.last() != Some(&t) {
                breaks.push(t);
            }
        }
        for &b in &breaks[1..breaks.len() - 1] {
            let mult = knots.iter().filter(|&&t| t == b).count();
            if mult > p {
                return Err(Error::InvalidKnots(format!(
                    "interior knot {b} has multiplicity {mult} > degree {p}"
                )));
            }
        }
        // Span of an element: last knot index equal to its left breakpoint.
        let element_spans: Vec<usize> = breaks[..breaks.len() - 1]
            .iter()
            .map(|&b| knots.iter().rposition(|&t| t == b).expect("breakpoint is a knot"))
            .collect();
        Ok(Self { degree, knots, breaks, element_spans })
    }

    /// Open knot vector from breakpoints with per-interior-breakpoint regularity.
    pub fn from_breakpoints(degree: usize, breakpoints: &[f64], regularity: &[usize]) -> Result<Self> {
        if breakpoints.len() < 2 || breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
            return Err(Error::InvalidKnots("breakpoints must start at 0 and end at 1".into()));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidKnots("breakpoints must be strictly increasing".into()));
        }
        if regularity.len() != breakpoints.len() - 2 {
            return Err(Error::InvalidKnots(format!(
                "expected {} interior regularities, got {}",
                breakpoints.len() - 2,
                regularity.len()
            )));
        }
        let mut knots = vec![0.0; degree + 1];
        for (&b, &r) in breakpoints[1..breakpoints.len() - 1].iter().zip(regularity) {
            if degree == 0 || r > degree - 1 {
                return Err(Error::InvalidKnots(format!(
                    "regularity {r} out of range 0..={} at breakpoint {b}",
                    degree.saturating_sub(1)
                )));
            }
            knots.extend(std::iter::repeat_n(b, degree - r));
        }
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Self::new(degree, knots)
    }

    /// Uniform knot vector with `n_elements` elements and constant interior regularity.
    pub fn uniform(degree: usize, n_elements: usize, regularity: usize) -> Result<Self> {
        if n_elements == 0 {
            return Err(Error::InvalidKnots("need at least one element".into()));
        }
        let bps: Vec<f64> = (0..=n_elements).map(|i| i as f64 / n_elements as f64).collect();
        Self::from_breakpoints(degree, &bps, &vec![regularity; n_elements - 1])
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn num_elements(&self) -> usize {
        self.breaks.len() - 1
    }

    /// Multiplicity of each interior breakpoint.
    pub fn interior_multiplicities(&self) -> Vec<usize> {
        self.breaks[1..self.breaks.len() - 1]
            .iter()
            .map(|&b| self.knots.iter().filter(|&&t| t == b).count())
            .collect()
    }

    /// Knot span index of element `e`.
    pub fn element_span(&self, e: usize) -> usize {
        self.element_spans[e]
    }

    /// Element containing `xi` (right-continuous, last element for `xi = 1`).
    pub fn element_of(&self, xi: f64) -> usize {
        let ne = self.num_elements();
        match self.breaks.binary_search_by(|b| b.partial_cmp(&xi).unwrap()) {
            Ok(k) => k.min(ne - 1),
            Err(k) => (k.max(1) - 1).min(ne - 1),
        }
    }

    pub fn find_span(&self, xi: f64) -> usize {
        self.element_span(self.element_of(xi))
    }

    /// Range of elements `[start, end)` on which function `i` is nonzero.
    pub fn support_elements(&self, i: usize) -> (usize, usize) {
        let p = self.degree;
        let lo = self.knots[i];
        let hi = self.knots[i + p + 1];
        let start = self.breaks.iter().position(|&b| b == lo).unwrap();
        let end = self.breaks.iter().position(|&b| b == hi).unwrap();
        (start, end)
    }

    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.num_basis())
            .map(|i| {
                if p == 0 {
                    0.5 * (self.knots[i] + self.knots[i + 1])
                } else {
                    self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64
                }
            })
            .collect()
    }

    pub fn eval_basis(&self, xi: f64, max_deriv: usize) -> Result<LocalBasisEval> {
        if !(0.0..=1.0).contains(&xi) || xi.is_nan() {
            return Err(Error::OutOfDomain(format!("xi = {xi} is outside [0, 1]")));
        }
        if max_deriv > 2 {
            return Err(Error::InvalidArgument("max_deriv is capped at 2".into()));
        }
        Ok(self.eval_basis_at_span(self.find_span(xi), xi, max_deriv))
    }

    /// Cox–de Boor values and derivatives on a known span (no argument checks).
    pub fn eval_basis_at_span(&self, span: usize, xi: f64, max_deriv: usize) -> LocalBasisEval {
        let p = self.degree;
        let t = &self.knots;
        let n = p + 1;
        // ndu[j][r]: basis values (upper triangle) and knot differences (lower).
        let mut ndu = vec![vec![0.0; n]; n];
        let mut left = vec![0.0; n];
        let mut right = vec![0.0; n];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = xi - t[span + 1 - j];
            right[j] = t[span + j] - xi;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let nd = max_deriv.min(p);
        let mut ders = vec![0.0; (max_deriv + 1) * n];
        for j in 0..n {
            ders[j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; n]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nd {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k * n + r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for k in 1..=nd {
            for j in 0..n {
                ders[k * n + j] *= fac;
            }
            fac *= (p - k) as f64;
        }
        LocalBasisEval { span, degree: p, max_deriv, ders }
    }
}

/// Knot-insertion (two-scale) matrix from a coarse to a nested fine space,
/// stored column-wise: `columns[j]` lists `(fine index, weight)` pairs.
#[derive(Clone, Debug)]
pub struct SubdivisionMatrix {
    pub n_fine: usize,
    pub n_coarse: usize,
    pub columns: Vec<Vec<(usize, f64)>>,
}

impl SubdivisionMatrix {
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n_coarse]; self.n_fine];
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                m[i][j] = v;
            }
        }
        m
    }

    /// Fine coefficients `S c` of a coarse coefficient vector.
    pub fn apply(&self, coarse: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_fine];
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                out[i] += v * coarse[j];
            }
        }
        out
    }

    /// Entry `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j].iter().find(|e| e.0 == i).map_or(0.0, |e| e.1)
    }
}

/// Knots of `fine` that are not in `coarse` (as multisets), or an error if
/// the spaces are not nested.
fn inserted_knots(coarse: &KnotVector, fine: &KnotVector) -> Result<Vec<f64>> {
    if coarse.degree != fine.degree {
        return Err(Error::NotNested(format!(
            "degree mismatch: coarse {} vs fine {}",
            coarse.degree, fine.degree
        )));
    }
    let (c, f) = (&coarse.knots, &fine.knots);
    let mut out = Vec::new();
    let mut i = 0;
    for &t in f {
        if i < c.len() && (c[i] - t).abs() <= KNOT_TOL {
            i += 1;
        } else if i < c.len() && c[i] < t {
            return Err(Error::NotNested(format!("coarse knot {} missing from fine knot vector", c[i])));
        } else {
            out.push(t);
        }
    }
    if i != c.len() {
        return Err(Error::NotNested("coarse knot vector is not contained in the fine one".into()));
    }
    Ok(out)
}

/// Subdivision matrix `S` with `fine(S c) == coarse(c)` pointwise.
pub fn subdivision_matrix(coarse: &KnotVector, fine: &KnotVector) -> Result<SubdivisionMatrix> {
    let new = inserted_knots(coarse, fine)?;
    let p = coarse.degree;
    let nc = coarse.num_basis();
    // Boehm insertion applied to the identity, one knot at a time. Row `i`
    // holds the coarse coefficients of fine function `i` (at most p+1 entries).
    let mut t = coarse.knots.clone();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..nc).map(|i| vec![(i, 1.0)]).collect();
    for u in new {
        let k = t.iter().rposition(|&x| x <= u).unwrap().min(t.len() - p - 2);
        let mut blended = Vec::with_capacity(p);
        for i in (k + 1).saturating_sub(p).max(1)..=k {
            let alpha = (u - t[i]) / (t[i + p] - t[i]);
            blended.push(blend(&rows[i], &rows[i - 1], alpha));
        }
        let lo = (k + 1).saturating_sub(p).max(1);
        rows.splice(lo..k, blended);
        t.insert(k + 1, u);
    }
    let nf = rows.len();
    let mut columns = vec![Vec::new(); nc];
    for (i, r) in rows.iter().enumerate() {
        for &(j, v) in r {
            if v != 0.0 {
                columns[j].push((i, v));
            }
        }
    }
    Ok(SubdivisionMatrix { n_fine: nf, n_coarse: nc, columns })
}

/// `alpha a + (1 - alpha) b` for sparse rows sorted by column.
fn blend(a: &[(usize, f64)], b: &[(usize, f64)], alpha: f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(a.len() + 1);
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let ca = a.get(i).map_or(usize::MAX, |e| e.0);
        let cb = b.get(j).map_or(usize::MAX, |e| e.0);
        if ca == cb {
            out.push((ca, alpha * a[i].1 + (1.0 - alpha) * b[j].1));
            i += 1;
            j += 1;
        } else if ca < cb {
            out.push((ca, alpha * a[i].1));
            i += 1;
        } else {
            out.push((cb, (1.0 - alpha) * b[j].1));
            j += 1;
        }
    }
    out
}

/// Per-element Bézier extraction operators `C_e` with
/// `N_{first(e) + a} = sum_b C_e[a][b] B_b` on element `e`, where `B_b` are the
/// Bernstein polynomials of degree `p` mapped to the element.
pub fn bezier_extraction(kv: &KnotVector) -> Vec<Vec<Vec<f64>>> {
    let p = kv.degree;
    let bps = kv.breakpoints();
    let mut knots = vec![0.0; p + 1];
    for &b in &bps[1..bps.len() - 1] {
        knots.extend(std::iter::repeat_n(b, p.max(1)));
    }
    knots.extend(std::iter::repeat_n(1.0, p + 1));
    let bez = KnotVector::new(p, knots).expect("valid Bézier knot vector");
    let s = subdivision_matrix(kv, &bez).expect("Bézier knots refine the input");
    let dense = s.to_dense();
    (0..kv.num_elements())
        .map(|e| {
            let first = kv.element_span(e) - p;
            (0..=p)
                .map(|a| (0..=p).map(|b| dense[e * p.max(1) + b][first + a]).collect())
                .collect()
        })
        .collect()
}

/// Bernstein polynomials of degree `p` on `[0, 1]`.
pub fn bernstein(p: usize, t: f64) -> Vec<f64> {
    let mut b = vec![0.0; p + 1];
    b[0] = 1.0;
    for j in 1..=p {
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = b[r];
            b[r] = saved + (1.0 - t) * tmp;
            saved = t * tmp;
        }
        b[j] = saved;
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct Cox–de Boor recursion, used as an independent oracle.
    fn cox_de_boor(t: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            let last = t.iter().rposition(|&v| v < 1.0).unwrap();
            return if (t[i] <= x && x < t[i + 1]) || (x == 1.0 && i == last) { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        if t[i + p] > t[i] {
            v += (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(t, i, p - 1, x);
        }
        if t[i + p + 1] > t[i + 1] {
            v += (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(t, i + 1, p - 1, x);
        }
        v
    }

    fn eval_fn(kv: &KnotVector, c: &[f64], x: f64) -> f64 {
        let b = kv.eval_basis(x, 0).unwrap();
        b.row(0).iter().enumerate().map(|(k, v)| v * c[b.first() + k]).sum()
    }

    #[test]
    fn knot_vector_construction() {
        let kv = KnotVector::from_breakpoints(3, &[0.0, 1.0], &[]).unwrap();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let kv = KnotVector::from_breakpoints(2, &[0.0, 0.5, 1.0], &[1]).unwrap();
        assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0]);
        let kv = KnotVector::from_breakpoints(3, &[0.0, 0.5, 1.0], &[0]).unwrap();
        assert_eq!(kv.interior_multiplicities(), vec![3]);
        assert_eq!(kv.num_basis(), 7);
    }

    #[test]
    fn knot_vector_errors() {
        assert!(KnotVector::from_breakpoints(2, &[0.0, 0.6, 0.5, 1.0], &[1, 1]).is_err());
        assert!(KnotVector::from_breakpoints(2, &[0.0, 0.5, 1.0], &[2]).is_err());
        assert!(KnotVector::new(2, vec![0.0, 0.0, 0.5, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn bezier_values() {
        let kv = KnotVector::uniform(3, 1, 0).unwrap();
        let b = kv.eval_basis(0.0, 0).unwrap();
        assert_eq!(b.row(0), &[1.0, 0.0, 0.0, 0.0]);
        let b = kv.eval_basis(0.5, 0).unwrap();
        for (v, e) in b.row(0).iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!(kv.eval_basis(1.2, 0).is_err());
    }

    #[test]
    fn matches_recursive_oracle() {
        let kv = KnotVector::from_breakpoints(3, &[0.0, 0.2, 0.45, 0.7, 1.0], &[2, 1, 0]).unwrap();
        for k in 0..=40 {
            let x = k as f64 / 40.0;
            let b = kv.eval_basis(x, 0).unwrap();
            for i in 0..kv.num_basis() {
                let local = i.checked_sub(b.first()).filter(|&l| l <= 3);
                let v = local.map_or(0.0, |l| b.row(0)[l]);
                assert!((v - cox_de_boor(kv.knots(), i, 3, x)).abs() < 1e-13, "x={x} i={i}");
            }
        }
    }

    #[test]
    fn partition_of_unity_and_derivative_sums() {
        let kv = KnotVector::uniform(3, 7, 2).unwrap();
        for k in 0..1000 {
            let x = k as f64 / 999.0;
            let b = kv.eval_basis(x, 2).unwrap();
            assert!((b.row(0).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(b.row(1).iter().sum::<f64>().abs() <= 1e-10);
            assert!(b.row(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let kv = KnotVector::from_breakpoints(3, &[0.0, 0.3, 0.6, 1.0], &[2, 1]).unwrap();
        let h = 1e-6;
        for &x in &[0.1, 0.2, 0.41, 0.55, 0.77, 0.93] {
            let b = kv.eval_basis(x, 2).unwrap();
            let bp = kv.eval_basis(x + h, 0).unwrap();
            let bm = kv.eval_basis(x - h, 0).unwrap();
            for l in 0..4 {
                let fd = (bp.row(0)[l] - bm.row(0)[l]) / (2.0 * h);
                let d = b.row(1)[l];
                assert!((fd - d).abs() <= 1e-5 * d.abs().max(1.0), "x={x} l={l}");
                let bp1 = kv.eval_basis(x + h, 1).unwrap();
                let bm1 = kv.eval_basis(x - h, 1).unwrap();
                let fd2 = (bp1.row(1)[l] - bm1.row(1)[l]) / (2.0 * h);
                assert!((fd2 - b.row(2)[l]).abs() <= 1e-4 * b.row(2)[l].abs().max(1.0));
            }
        }
    }

    #[test]
    fn subdivision_identity_and_constants() {
        let kv = KnotVector::uniform(3, 4, 2).unwrap();
        let s = subdivision_matrix(&kv, &kv).unwrap();
        let d = s.to_dense();
        for (i, row) in d.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        let c = KnotVector::uniform(3, 1, 2).unwrap();
        let f = KnotVector::uniform(3, 2, 2).unwrap();
        let s = subdivision_matrix(&c, &f).unwrap();
        for v in s.apply(&[1.0; 4]) {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn subdivision_reproduces_function() {
        let c = KnotVector::from_breakpoints(3, &[0.0, 0.5, 1.0], &[2]).unwrap();
        let f = KnotVector::from_breakpoints(3, &[0.0, 0.25, 0.5, 0.6, 1.0], &[2, 1, 0]).unwrap();
        let s = subdivision_matrix(&c, &f).unwrap();
        let coef: Vec<f64> = (0..c.num_basis()).map(|i| ((i * 7 + 3) % 5) as f64 - 1.7).collect();
        let fine = s.apply(&coef);
        for k in 0..50 {
            let x = k as f64 / 49.0;
            assert!((eval_fn(&c, &coef, x) - eval_fn(&f, &fine, x)).abs() <= 1e-13);
        }
        assert!(subdivision_matrix(&f, &c).is_err());
        let q = KnotVector::uniform(2, 2, 1).unwrap();
        assert!(subdivision_matrix(&q, &f).is_err());
    }

    #[test]
    fn subdivision_composes() {
        let k0 = KnotVector::uniform(3, 2, 2).unwrap();
        let k1 = KnotVector::uniform(3, 4, 2).unwrap();
        let k2 = KnotVector::uniform(3, 8, 2).unwrap();
        let s01 = subdivision_matrix(&k0, &k1).unwrap().to_dense();
        let s12 = subdivision_matrix(&k1, &k2).unwrap().to_dense();
        let s02 = subdivision_matrix(&k0, &k2).unwrap().to_dense();
        for i in 0..s02.len() {
            for j in 0..s02[0].len() {
                let v: f64 = (0..s01.len()).map(|k| s12[i][k] * s01[k][j]).sum();
                assert!((v - s02[i][j]).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn bezier_extraction_cases() {
        let kv = KnotVector::uniform(3, 1, 0).unwrap();
        let c = bezier_extraction(&kv);
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(c[0][a][b], if a == b { 1.0 } else { 0.0 });
            }
        }
        let kv = KnotVector::uniform(3, 2, 0).unwrap();
        for ce in bezier_extraction(&kv) {
            for a in 0..4 {
                for b in 0..4 {
                    assert_eq!(ce[a][b], if a == b { 1.0 } else { 0.0 });
                }
            }
        }
        let kv = KnotVector::uniform(3, 2, 2).unwrap();
        let ops = bezier_extraction(&kv);
        let coef = [0.3, -1.2, 2.5, 0.7, 1.9];
        for k in 0..20 {
            let x = (k as f64 + 0.37) / 20.0;
            let e = kv.element_of(x);
            let (lo, hi) = (kv.breakpoints()[e], kv.breakpoints()[e + 1]);
            let bern = bernstein(3, (x - lo) / (hi - lo));
            let first = kv.element_span(e) - 3;
            let v: f64 = (0..4)
                .map(|a| coef[first + a] * (0..4).map(|b| ops[e][a][b] * bern[b]).sum::<f64>())
                .sum();
            assert!((v - eval_fn(&kv, &coef, x)).abs() <= 1e-13);
            // Extraction columns sum to one (partition of unity).
            for b in 0..4 {
                assert!(((0..4).map(|a| ops[e][a][b]).sum::<f64>() - 1.0).abs() < 1e-14);
            }
        }
    }
}
