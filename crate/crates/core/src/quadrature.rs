//! Gauss–Legendre rules on active elements and cached basis tables.

use crate::thb::{Jet, ThbSpace};

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = 0.5 * (1.0 - z);
        x[n - 1 - i] = 0.5 * (1.0 + z);
        w[i] = 0.5 * wi;
        w[n - 1 - i] = 0.5 * wi;
    }
    (x, w)
}

/// Tensor Gauss points on every active cell of a space.
#[derive(Clone, Debug)]
pub struct QuadRule {
    pub q: usize,
    /// Offset of each cell's first point in the flat point arrays.
    pub offsets: Vec<usize>,
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub cell_of_point: Vec<usize>,
}

impl QuadRule {
    pub fn new(space: &ThbSpace, q: usize) -> Self {
        let (gx, gw) = gauss_legendre(q);
        let mut offsets = Vec::with_capacity(space.num_cells() + 1);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut cell_of_point = Vec::new();
        for (c, cell) in space.cells().iter().enumerate() {
            offsets.push(points.len());
            let [x0, x1, y0, y1] = cell.bounds;
            for b in 0..q {
                for a in 0..q {
                    points.push([x0 + (x1 - x0) * gx[a], y0 + (y1 - y0) * gx[b]]);
                    weights.push(gw[a] * gw[b] * cell.area());
                    cell_of_point.push(c);
                }
            }
        }
        offsets.push(points.len());
        Self { q, offsets, points, weights, cell_of_point }
    }

    pub fn num_cells(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn cell_range(&self, c: usize) -> std::ops::Range<usize> {
        self.offsets[c]..self.offsets[c + 1]
    }
}

/// Basis jets of a space at every point of a rule built on the same mesh.
#[derive(Clone, Debug)]
pub struct BasisTable {
    /// DOFs nonzero on each rule cell.
    pub cell_dofs: Vec<Vec<usize>>,
    /// Per point: jets of the cell's DOFs in `cell_dofs` order.
    pub jets: Vec<Vec<Jet>>,
}

impl BasisTable {
    /// `rule` must come from a space with the same mesh as `space`.
    pub fn new(space: &ThbSpace, rule: &QuadRule) -> Self {
        assert_eq!(space.num_cells(), rule.num_cells(), "basis table needs a rule on the same mesh");
        let per_cell = crate::par::map(rule.num_cells(), |c| {
            let mut jets = Vec::new();
            let mut dofs = Vec::new();
            for k in rule.cell_range(c) {
                let [xi, eta] = rule.points[k];
                let pb = space.eval_in_cell(c, xi, eta);
                dofs = pb.dofs;
                jets.push(pb.jets);
            }
            (dofs, jets)
        });
        let mut cell_dofs = Vec::with_capacity(per_cell.len());
        let mut jets = Vec::with_capacity(rule.num_points());
        for (d, j) in per_cell {
            cell_dofs.push(d);
            jets.extend(j);
        }
        Self { cell_dofs, jets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_exactness() {
        for n in 1..8 {
            let (x, w) = gauss_legendre(n);
            for d in 0..2 * n {
                let v: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(d as i32)).sum();
                assert!((v - 1.0 / (d + 1) as f64).abs() < 1e-14, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn weights_sum_to_area() {
        let s = ThbSpace::uniform(3, 2, 3).unwrap();
        let (s, _) = s.refine_functions(&[20]).unwrap();
        let r = QuadRule::new(&s, 4);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        let v: f64 = r.points.iter().zip(&r.weights).map(|(p, w)| w * p[0].powi(7) * p[1].powi(6)).sum();
        assert!((v - 1.0 / 56.0).abs() < 1e-14);
    }
}
