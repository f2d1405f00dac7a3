//! Sparse matrices, direct solves and a restarted GMRES.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{Error, Result};

/// Square or rectangular sparse matrix in compressed-row form.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Build from triplets; duplicates are summed in input order.
    pub fn from_triplets(n_rows: usize, n_cols: usize, trip: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..trip.len()).collect();
        order.sort_by_key(|&k| (trip[k].0, trip[k].1));
        let mut row_ptr = vec![0; n_rows + 1];
        let mut col_idx = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for k in order {
            let (r, c, v) = trip[k];
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { n_rows, n_cols, row_ptr, col_idx, vals }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.vals[k] * x[self.col_idx[k]]).sum())
            .collect()
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_cols];
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.vals[k] * x[r];
            }
        }
        y
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.row_ptr[r]..self.row_ptr[r + 1])
            .find(|&k| self.col_idx[k] == c)
            .map_or(0.0, |k| self.vals[k])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn transpose(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                trip.push((self.col_idx[k], r, self.vals[k]));
            }
        }
        Self::from_triplets(self.n_cols, self.n_rows, &trip)
    }

    /// `self + s * other` for matrices of equal shape.
    pub fn add_scaled(&self, other: &CsrMatrix, s: f64) -> Self {
        let mut trip = self.triplets();
        trip.extend(other.triplets().into_iter().map(|(r, c, v)| (r, c, s * v)));
        Self::from_triplets(self.n_rows, self.n_cols, &trip)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                t.push((r, self.col_idx[k], self.vals[k]));
            }
        }
        t
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, c, v) in self.triplets() {
            d[r][c] += v;
        }
        d
    }
}

/// Sparse LU factorization; reusable for several right-hand sides.
pub struct SparseLu {
    n: usize,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        if a.n_rows != a.n_cols {
            return Err(Error::InvalidArgument("LU needs a square matrix".into()));
        }
        let n = a.n_rows;
        if n == 0 {
            return Err(Error::Singular("empty system".into()));
        }
        let trip: Vec<Triplet<usize, usize, f64>> =
            a.triplets().into_iter().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::Singular(format!("matrix construction failed: {e:?}")))?;
        let lu = m.sp_lu().map_err(|e| Error::Singular(format!("LU factorization failed: {e:?}")))?;
        Ok(Self { n, lu })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        finite((0..self.n).map(|i| x[(i, 0)]).collect())
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve_transpose(&rhs);
        finite((0..self.n).map(|i| x[(i, 0)]).collect())
    }
}

fn finite(x: Vec<f64>) -> Result<Vec<f64>> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular("solution contains non-finite entries".into()))
    }
}

pub fn solve(a: &CsrMatrix, b: &[f64]) -> Result<Vec<f64>> {
    SparseLu::new(a)?.solve(b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Clone, Debug)]
pub struct GmresResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Restarted GMRES with optional right diagonal preconditioning.
pub fn gmres<F>(op: F, b: &[f64], precond: Option<&[f64]>, rtol: f64, restart: usize, max_iter: usize) -> GmresResult
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return GmresResult { x, iterations: 0, rel_residual: 0.0, converged: true };
    }
    let apply_m = |v: &[f64]| -> Vec<f64> {
        match precond {
            Some(d) => v.iter().zip(d).map(|(a, s)| a * s).collect(),
            None => v.to_vec(),
        }
    };
    let mut total = 0;
    let mut rel;
    while total < max_iter {
        let ax = op(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        rel = beta / bnorm;
        if rel <= rtol {
            return GmresResult { x, iterations: total, rel_residual: rel, converged: true };
        }
        let m = restart.min(max_iter - total).max(1);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut w = op(&apply_m(&v[k]));
            for (i, vi) in v.iter().enumerate() {
                h[i][k] = dot(&w, vi);
                axpy(&mut w, -h[i][k], vi);
            }
            // Second Gram–Schmidt pass for stability.
            for (i, vi) in v.iter().enumerate() {
                let c = dot(&w, vi);
                h[i][k] += c;
                axpy(&mut w, -c, vi);
            }
            h[k + 1][k] = norm2(&w);
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let den = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if den == 0.0 {
                break;
            }
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            total += 1;
            let hk1 = norm2(&w);
            rel = g[k + 1].abs() / bnorm;
            if rel <= rtol || hk1 == 0.0 {
                break;
            }
            v.push(w.iter().map(|wi| wi / hk1).collect());
        }
        if k_used == 0 {
            break;
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        let mut dx = vec![0.0; n];
        for (i, yi) in y.iter().enumerate() {
            axpy(&mut dx, *yi, &v[i]);
        }
        axpy(&mut x, 1.0, &apply_m(&dx));
        if rel <= rtol {
            break;
        }
    }
    let ax = op(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let rel_true = norm2(&r) / bnorm;
    GmresResult { x, iterations: total, rel_residual: rel_true, converged: rel_true <= rtol * 1.0001 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.3));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        let x = solve(&a, &[3.0, 2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn lu_and_transpose_solve() {
        let a = laplace_1d(30);
        let xs: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.matvec(&xs);
        let lu = SparseLu::new(&a).unwrap();
        let x = lu.solve(&b).unwrap();
        assert!(x.iter().zip(&xs).all(|(p, q)| (p - q).abs() < 1e-12));
        let bt = a.matvec_transpose(&xs);
        let xt = lu.solve_transpose(&bt).unwrap();
        assert!(xt.iter().zip(&xs).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn singular_is_reported() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(solve(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gmres_matches_direct() {
        let a = laplace_1d(40);
        let b: Vec<f64> = (0..40).map(|i| 1.0 + i as f64 * 0.01).collect();
        let r = gmres(|v| a.matvec(v), &b, None, 1e-10, 40, 400);
        assert!(r.converged, "{} {}", r.iterations, r.rel_residual);
        let x = solve(&a, &b).unwrap();
        assert!(r.x.iter().zip(&x).all(|(p, q)| (p - q).abs() < 1e-7));
    }
}
