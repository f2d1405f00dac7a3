//! Truncated hierarchical B-spline spaces over dyadically refined meshes of
//! the unit square.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splinecore::{subdivision_matrix, KnotVector, SubdivisionMatrix};

pub const DEFAULT_MAX_LEVELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellState {
    Absent,
    Active,
    Refined,
}

/// Element hierarchy: level `l` is an `n0 2^l` square grid; a cell at level
/// `l + 1` exists exactly when its parent is refined.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchicalMesh {
    n0: usize,
    max_levels: usize,
    levels: Vec<Vec<CellState>>,
}

impl HierarchicalMesh {
    pub fn new(n0: usize) -> Result<Self> {
        Self::with_max_levels(n0, DEFAULT_MAX_LEVELS)
    }

    pub fn with_max_levels(n0: usize, max_levels: usize) -> Result<Self> {
        if n0 == 0 || max_levels == 0 {
            return Err(Error::InvalidArgument("n0 and max_levels must be positive".into()));
        }
        Ok(Self { n0, max_levels, levels: vec![vec![CellState::Active; n0 * n0]] })
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn max_levels(&self) -> usize {
        self.max_levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Elements per direction at `level`.
    pub fn n(&self, level: usize) -> usize {
        self.n0 << level
    }

    pub fn state(&self, level: usize, i: usize, j: usize) -> CellState {
        match self.levels.get(level) {
            Some(g) => g[j * self.n(level) + i],
            None => CellState::Absent,
        }
    }

    fn present(&self, level: usize, i: usize, j: usize) -> bool {
        self.state(level, i, j) != CellState::Absent
    }

    /// Subdivide an active cell. Returns `false` when the level cap forbids it.
    pub fn refine_cell(&mut self, level: usize, i: usize, j: usize) -> Result<bool> {
        if self.state(level, i, j) != CellState::Active {
            return Err(Error::InvalidArgument(format!("cell ({level}, {i}, {j}) is not active")));
        }
        if level + 1 >= self.max_levels {
            return Ok(false);
        }
        if self.levels.len() == level + 1 {
            let n = self.n(level + 1);
            self.levels.push(vec![CellState::Absent; n * n]);
        }
        let n = self.n(level);
        self.levels[level][j * n + i] = CellState::Refined;
        let nf = self.n(level + 1);
        for (ci, cj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            self.levels[level + 1][(2 * j + cj) * nf + 2 * i + ci] = CellState::Active;
        }
        Ok(true)
    }

    /// Active cells ordered by level, then row, then column.
    pub fn active_cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (l, g) in self.levels.iter().enumerate() {
            let n = self.n(l);
            for (k, s) in g.iter().enumerate() {
                if *s == CellState::Active {
                    out.push((l, k % n, k / n));
                }
            }
        }
        out
    }

    /// Refined cells in the order they must be replayed to rebuild the mesh.
    pub fn refined_cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (l, g) in self.levels.iter().enumerate() {
            let n = self.n(l);
            for (k, s) in g.iter().enumerate() {
                if *s == CellState::Refined {
                    out.push((l, k % n, k / n));
                }
            }
        }
        out
    }

    pub fn from_refined(n0: usize, max_levels: usize, refined: &[(usize, usize, usize)]) -> Result<Self> {
        let mut m = Self::with_max_levels(n0, max_levels)?;
        let mut sorted = refined.to_vec();
        sorted.sort();
        for (l, i, j) in sorted {
            if !m.refine_cell(l, i, j)? {
                return Err(Error::InvalidArgument(format!("cell ({l}, {i}, {j}) exceeds level cap")));
            }
        }
        Ok(m)
    }

    /// True when every cell present in `coarse` is present here.
    pub fn refines(&self, coarse: &HierarchicalMesh) -> bool {
        if self.n0 != coarse.n0 || coarse.levels.len() > self.levels.len() {
            return false;
        }
        coarse.levels.iter().enumerate().all(|(l, g)| {
            let n = coarse.n(l);
            g.iter()
                .enumerate()
                .all(|(k, s)| *s == CellState::Absent || self.present(l, k % n, k / n))
        })
    }

    pub fn cell_bounds(&self, level: usize, i: usize, j: usize) -> [f64; 4] {
        let h = 1.0 / self.n(level) as f64;
        [i as f64 * h, (i + 1) as f64 * h, j as f64 * h, (j + 1) as f64 * h]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub level: usize,
    pub i: usize,
    pub j: usize,
    /// `[xi0, xi1, eta0, eta1]`
    pub bounds: [f64; 4],
}

impl Cell {
    pub fn area(&self) -> f64 {
        (self.bounds[1] - self.bounds[0]) * (self.bounds[3] - self.bounds[2])
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.bounds[0] + self.bounds[1]), 0.5 * (self.bounds[2] + self.bounds[3])]
    }

    pub fn on_boundary(&self, n: usize) -> bool {
        self.i == 0 || self.j == 0 || self.i + 1 == n || self.j + 1 == n
    }
}

/// Value and derivatives of one function at a point:
/// `[v, d_xi, d_eta, d_xixi, d_xieta, d_etaeta]`.
pub type Jet = [f64; 6];

/// All functions that are nonzero on a cell, evaluated at one point.
#[derive(Clone, Debug, Default)]
pub struct PointBasis {
    pub dofs: Vec<usize>,
    pub jets: Vec<Jet>,
}

/// Representation of one active function on one active cell in the local
/// tensor B-splines of the cell's level (`(p+1)^2` entries, xi fastest).
#[derive(Clone, Debug)]
struct CellFunction {
    dof: usize,
    local: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ThbSpace {
    degree: usize,
    regularity: usize,
    mesh: HierarchicalMesh,
    kvs: Vec<KnotVector>,
    subdiv: Vec<SubdivisionMatrix>,
    funcs: Vec<(usize, usize, usize)>,
    dof_lookup: Vec<HashMap<(usize, usize), usize>>,
    cells: Vec<Cell>,
    cell_lookup: Vec<HashMap<(usize, usize), usize>>,
    cell_funcs: Vec<Vec<CellFunction>>,
    boundary: Vec<bool>,
}

type SparseCoeffs = BTreeMap<(usize, usize), f64>;

impl ThbSpace {
    /// Tensor-product space with `n0 x n0` elements.
    pub fn uniform(degree: usize, regularity: usize, n0: usize) -> Result<Self> {
        Self::new(degree, regularity, HierarchicalMesh::new(n0)?)
    }

    pub fn new(degree: usize, regularity: usize, mesh: HierarchicalMesh) -> Result<Self> {
        if degree == 0 || regularity >= degree {
            return Err(Error::InvalidArgument(format!(
                "need degree >= 1 and regularity < degree, got p = {degree}, alpha = {regularity}"
            )));
        }
        let nl = mesh.num_levels();
        let kvs = (0..nl)
            .map(|l| KnotVector::uniform(degree, mesh.n(l), regularity))
            .collect::<Result<Vec<_>>>()?;
        let subdiv = (0..nl.saturating_sub(1))
            .map(|l| subdivision_matrix(&kvs[l], &kvs[l + 1]))
            .collect::<Result<Vec<_>>>()?;
        let mut space = Self {
            degree,
            regularity,
            mesh,
            kvs,
            subdiv,
            funcs: Vec::new(),
            dof_lookup: Vec::new(),
            cells: Vec::new(),
            cell_lookup: Vec::new(),
            cell_funcs: Vec::new(),
            boundary: Vec::new(),
        };
        space.build();
        Ok(space)
    }

    fn support(&self, level: usize, i: usize, j: usize) -> ((usize, usize), (usize, usize)) {
        let kv = &self.kvs[level];
        (kv.support_elements(i), kv.support_elements(j))
    }

    fn support_cells(&self, level: usize, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> {
        let ((x0, x1), (y0, y1)) = self.support(level, i, j);
        (y0..y1).flat_map(move |cj| (x0..x1).map(move |ci| (ci, cj)))
    }

    fn build(&mut self) {
        let p = self.degree;
        let nl = self.mesh.num_levels();
        // Active functions.
        let mut funcs = Vec::new();
        for l in 0..nl {
            let n = self.mesh.n(l);
            let mut cand = BTreeSet::new();
            for k in 0..n * n {
                let (ci, cj) = (k % n, k / n);
                if self.mesh.present(l, ci, cj) {
                    let fx = self.kvs[l].element_span(ci) - p;
                    let fy = self.kvs[l].element_span(cj) - p;
                    for b in 0..=p {
                        for a in 0..=p {
                            cand.insert((fy + b, fx + a));
                        }
                    }
                }
            }
            for (j, i) in cand {
                let mut all_present = true;
                let mut all_refined = true;
                for (ci, cj) in self.support_cells(l, i, j) {
                    match self.mesh.state(l, ci, cj) {
                        CellState::Absent => all_present = false,
                        CellState::Active => all_refined = false,
                        CellState::Refined => {}
                    }
                }
                if all_present && !all_refined {
                    funcs.push((l, i, j));
                }
            }
        }
        let mut dof_lookup = vec![HashMap::new(); nl];
        for (d, &(l, i, j)) in funcs.iter().enumerate() {
            dof_lookup[l].insert((i, j), d);
        }
        // Active cells.
        let cells: Vec<Cell> = self
            .mesh
            .active_cells()
            .into_iter()
            .map(|(level, i, j)| Cell { level, i, j, bounds: self.mesh.cell_bounds(level, i, j) })
            .collect();
        let mut cell_lookup = vec![HashMap::new(); nl];
        for (c, cell) in cells.iter().enumerate() {
            cell_lookup[cell.level].insert((cell.i, cell.j), c);
        }
        self.funcs = funcs;
        self.dof_lookup = dof_lookup;
        self.cells = cells;
        self.cell_lookup = cell_lookup;
        let mut cell_funcs: Vec<Vec<CellFunction>> = vec![Vec::new(); self.cells.len()];
        for d in 0..self.funcs.len() {
            for (c, local) in self.truncated_function(d) {
                cell_funcs[c].push(CellFunction { dof: d, local });
            }
        }
        for cf in cell_funcs.iter_mut() {
            cf.sort_by_key(|f| f.dof);
        }
        self.cell_funcs = cell_funcs;
        self.boundary = self.compute_boundary_mask();
    }

    /// Local representations of the truncated function `d` on every active cell
    /// where it is nonzero.
    fn truncated_function(&self, d: usize) -> Vec<(usize, Vec<f64>)> {
        let p = self.degree;
        let nloc = (p + 1) * (p + 1);
        let (l0, i0, j0) = self.funcs[d];
        let nl = self.mesh.num_levels();
        let mut rep: SparseCoeffs = BTreeMap::from([((i0, j0), 1.0)]);
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for m in l0..nl {
            let kv = &self.kvs[m];
            for (&(a, b), &c) in &rep {
                for (ci, cj) in self.support_cells(m, a, b) {
                    if self.mesh.state(m, ci, cj) == CellState::Active {
                        let cell = self.cell_lookup[m][&(ci, cj)];
                        let la = a - (kv.element_span(ci) - p);
                        let lb = b - (kv.element_span(cj) - p);
                        out.entry(cell).or_insert_with(|| vec![0.0; nloc])[lb * (p + 1) + la] += c;
                    }
                }
            }
            if m + 1 == nl {
                break;
            }
            rep.retain(|&(a, b), _| {
                self.support_cells(m, a, b).any(|(ci, cj)| self.mesh.state(m, ci, cj) == CellState::Refined)
            });
            if rep.is_empty() {
                break;
            }
            let s = &self.subdiv[m];
            let mut next: SparseCoeffs = BTreeMap::new();
            for (&(a, b), &c) in &rep {
                for &(fa, wa) in &s.columns[a] {
                    for &(fb, wb) in &s.columns[b] {
                        *next.entry((fa, fb)).or_insert(0.0) += c * wa * wb;
                    }
                }
            }
            next.retain(|&(a, b), v| {
                *v != 0.0 && !self.support_cells(m + 1, a, b).all(|(ci, cj)| self.mesh.present(m + 1, ci, cj))
            });
            rep = next;
        }
        out.into_iter().collect()
    }

    fn compute_boundary_mask(&self) -> Vec<bool> {
        let p = self.degree;
        let mut mask = vec![false; self.funcs.len()];
        for (c, cell) in self.cells.iter().enumerate() {
            let n = self.mesh.n(cell.level);
            if !cell.on_boundary(n) {
                continue;
            }
            let kv = &self.kvs[cell.level];
            let nb = kv.num_basis();
            let fx = kv.element_span(cell.i) - p;
            let fy = kv.element_span(cell.j) - p;
            for f in &self.cell_funcs[c] {
                let hit = f.local.iter().enumerate().any(|(k, &v)| {
                    let (ga, gb) = (fx + k % (p + 1), fy + k / (p + 1));
                    v != 0.0
                        && ((cell.i == 0 && ga == 0)
                            || (cell.i + 1 == n && ga + 1 == nb)
                            || (cell.j == 0 && gb == 0)
                            || (cell.j + 1 == n && gb + 1 == nb))
                });
                if hit {
                    mask[f.dof] = true;
                }
            }
        }
        mask
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn regularity(&self) -> usize {
        self.regularity
    }

    pub fn mesh(&self) -> &HierarchicalMesh {
        &self.mesh
    }

    pub fn num_dofs(&self) -> usize {
        self.funcs.len()
    }

    /// `(level, i, j)` of each DOF.
    pub fn functions(&self) -> &[(usize, usize, usize)] {
        &self.funcs
    }

    pub fn dof_of(&self, level: usize, i: usize, j: usize) -> Option<usize> {
        self.dof_lookup.get(level)?.get(&(i, j)).copied()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn interior_dofs(&self) -> Vec<usize> {
        (0..self.num_dofs()).filter(|&d| !self.boundary[d]).collect()
    }

    pub fn boundary_dofs(&self) -> Vec<usize> {
        (0..self.num_dofs()).filter(|&d| self.boundary[d]).collect()
    }

    pub fn knot_vector(&self, level: usize) -> &KnotVector {
        &self.kvs[level]
    }

    /// DOFs nonzero on cell `c`, ascending.
    pub fn cell_dofs(&self, c: usize) -> Vec<usize> {
        self.cell_funcs[c].iter().map(|f| f.dof).collect()
    }

    /// Number of levels spanned by functions nonzero on a common cell
    /// (recorded as a grading diagnostic).
    pub fn max_overlap_depth(&self) -> usize {
        self.cell_funcs
            .iter()
            .enumerate()
            .map(|(c, fs)| {
                let lc = self.cells[c].level;
                fs.iter().map(|f| lc - self.funcs[f.dof].0).max().unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }

    /// Active cell containing `(xi, eta)`.
    pub fn locate(&self, xi: f64, eta: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&xi) || !(0.0..=1.0).contains(&eta) {
            return Err(Error::OutOfDomain(format!("({xi}, {eta}) is outside the unit square")));
        }
        for l in 0..self.mesh.num_levels() {
            let i = self.kvs[l].element_of(xi);
            let j = self.kvs[l].element_of(eta);
            match self.mesh.state(l, i, j) {
                CellState::Active => return Ok(self.cell_lookup[l][&(i, j)]),
                CellState::Refined => continue,
                CellState::Absent => break,
            }
        }
        Err(Error::OutOfDomain(format!("no active cell contains ({xi}, {eta})")))
    }

    /// Tensor-product jets of the `(p+1)^2` local B-splines of cell `c` at a point.
    fn local_tensor_jets(&self, c: usize, xi: f64, eta: f64) -> Vec<Jet> {
        let cell = &self.cells[c];
        let kv = &self.kvs[cell.level];
        let p = self.degree;
        let bx = kv.eval_basis_at_span(kv.element_span(cell.i), xi, 2);
        let by = kv.eval_basis_at_span(kv.element_span(cell.j), eta, 2);
        let (x0, x1, x2) = (bx.row(0), bx.row(1), bx.row(2));
        let (y0, y1, y2) = (by.row(0), by.row(1), by.row(2));
        let mut out = Vec::with_capacity((p + 1) * (p + 1));
        for b in 0..=p {
            for a in 0..=p {
                out.push([
                    x0[a] * y0[b],
                    x1[a] * y0[b],
                    x0[a] * y1[b],
                    x2[a] * y0[b],
                    x1[a] * y1[b],
                    x0[a] * y2[b],
                ]);
            }
        }
        out
    }

    /// Jets of all functions nonzero on cell `c` at a point, using the cell's
    /// polynomial piece (the point may lie on the cell's closure).
    pub fn eval_in_cell(&self, c: usize, xi: f64, eta: f64) -> PointBasis {
        let t = self.local_tensor_jets(c, xi, eta);
        let fs = &self.cell_funcs[c];
        let mut pb = PointBasis { dofs: Vec::with_capacity(fs.len()), jets: Vec::with_capacity(fs.len()) };
        for f in fs {
            let mut jet = [0.0; 6];
            for (w, tj) in f.local.iter().zip(&t) {
                if *w != 0.0 {
                    for k in 0..6 {
                        jet[k] += w * tj[k];
                    }
                }
            }
            pb.dofs.push(f.dof);
            pb.jets.push(jet);
        }
        pb
    }

    pub fn eval_point(&self, xi: f64, eta: f64) -> Result<PointBasis> {
        Ok(self.eval_in_cell(self.locate(xi, eta)?, xi, eta))
    }

    /// Refine the coarsest active support cells of every marked function.
    pub fn refine_functions(&self, marked: &[usize]) -> Result<(ThbSpace, RefineInfo)> {
        let mut info = RefineInfo::default();
        if marked.is_empty() {
            info.noop = true;
            return Ok((self.clone(), info));
        }
        let mut mesh = self.mesh.clone();
        let mut cells = BTreeSet::new();
        for &d in marked {
            if d >= self.num_dofs() {
                return Err(Error::InvalidArgument(format!("marked index {d} is not a DOF")));
            }
            let (l, i, j) = self.funcs[d];
            for (ci, cj) in self.support_cells(l, i, j) {
                if self.mesh.state(l, ci, cj) == CellState::Active {
                    cells.insert((l, ci, cj));
                }
            }
        }
        for (l, i, j) in cells {
            if mesh.refine_cell(l, i, j)? {
                info.refined_cells += 1;
            } else {
                info.skipped_at_cap += 1;
            }
        }
        let fine = ThbSpace::new(self.degree, self.regularity, mesh)?;
        info.removed_functions = self
            .funcs
            .iter()
            .filter(|&&(l, i, j)| fine.dof_of(l, i, j).is_none())
            .count();
        Ok((fine, info))
    }

    /// Refine a list of active cells given as `(level, i, j)`.
    pub fn refine_cells(&self, cells: &[(usize, usize, usize)]) -> Result<(ThbSpace, RefineInfo)> {
        let mut mesh = self.mesh.clone();
        let mut info = RefineInfo { noop: cells.is_empty(), ..Default::default() };
        let set: BTreeSet<_> = cells.iter().copied().collect();
        for (l, i, j) in set {
            if mesh.refine_cell(l, i, j)? {
                info.refined_cells += 1;
            } else {
                info.skipped_at_cap += 1;
            }
        }
        let fine = ThbSpace::new(self.degree, self.regularity, mesh)?;
        info.removed_functions =
            self.funcs.iter().filter(|&&(l, i, j)| fine.dof_of(l, i, j).is_none()).count();
        Ok((fine, info))
    }

    /// Dyadic refinement of every active cell.
    pub fn refine_uniform(&self) -> Result<ThbSpace> {
        let cells: Vec<_> = self.cells.iter().map(|c| (c.level, c.i, c.j)).collect();
        Ok(self.refine_cells(&cells)?.0)
    }

    /// Degree `p + 1`, regularity `alpha + 1` space on the same mesh.
    pub fn adjoint_space(&self) -> Result<ThbSpace> {
        ThbSpace::new(self.degree + 1, self.regularity + 1, self.mesh.clone())
    }

    /// Coefficients of the identity map. A function of the level-0 tensor
    /// space keeps its level-`l` B-spline coefficients in the THB basis, and
    /// those of `(xi, eta)` are the Greville abscissae.
    pub fn identity_coeffs(&self) -> Vec<[f64; 2]> {
        let gr: Vec<Vec<f64>> = self.kvs.iter().map(|kv| kv.greville()).collect();
        self.funcs.iter().map(|&(l, i, j)| [gr[l][i], gr[l][j]]).collect()
    }

    /// True when `self` contains every function of `coarse`.
    pub fn is_refinement_of(&self, coarse: &ThbSpace) -> bool {
        self.degree == coarse.degree && self.regularity == coarse.regularity && self.mesh.refines(&coarse.mesh)
    }

    /// Coefficients of `coarse`'s function `coeffs` in this (finer) space.
    pub fn prolong<const D: usize>(&self, coarse: &ThbSpace, coeffs: &[[f64; D]]) -> Result<Vec<[f64; D]>> {
        if !self.is_refinement_of(coarse) {
            return Err(Error::NotNested("target space does not refine the source space".into()));
        }
        if coeffs.len() != coarse.num_dofs() {
            return Err(Error::InvalidArgument("coefficient count does not match the source space".into()));
        }
        let p = self.degree;
        let mut cache: HashMap<(usize, usize), BTreeMap<(usize, usize), [f64; D]>> = HashMap::new();
        let mut out = vec![[0.0; D]; self.num_dofs()];
        for (d, &(l, i, j)) in self.funcs.iter().enumerate() {
            let (ci, cj) = self
                .support_cells(l, i, j)
                .find(|&(ci, cj)| self.mesh.state(l, ci, cj) == CellState::Active)
                .expect("active function has an active support cell at its level");
            let ctr = self.mesh.cell_bounds(l, ci, cj);
            let cc = coarse.locate(0.5 * (ctr[0] + ctr[1]), 0.5 * (ctr[2] + ctr[3]))?;
            let rep = cache.entry((cc, l)).or_insert_with(|| {
                let cell = coarse.cells[cc];
                let kv = &coarse.kvs[cell.level];
                let fx = kv.element_span(cell.i) - p;
                let fy = kv.element_span(cell.j) - p;
                let mut rep: BTreeMap<(usize, usize), [f64; D]> = BTreeMap::new();
                for f in &coarse.cell_funcs[cc] {
                    for (k, &w) in f.local.iter().enumerate() {
                        if w != 0.0 {
                            let e = rep.entry((fx + k % (p + 1), fy + k / (p + 1))).or_insert([0.0; D]);
                            for q in 0..D {
                                e[q] += w * coeffs[f.dof][q];
                            }
                        }
                    }
                }
                for m in cell.level..l {
                    let s = &self.subdiv[m];
                    let mut next: BTreeMap<(usize, usize), [f64; D]> = BTreeMap::new();
                    for (&(a, b), v) in &rep {
                        for &(fa, wa) in &s.columns[a] {
                            for &(fb, wb) in &s.columns[b] {
                                let e = next.entry((fa, fb)).or_insert([0.0; D]);
                                for q in 0..D {
                                    e[q] += wa * wb * v[q];
                                }
                            }
                        }
                    }
                    rep = next;
                }
                rep
            });
            if coarse.cells[cc].level > l {
                return Err(Error::NotNested("source cell is finer than target function level".into()));
            }
            out[d] = *rep.get(&(i, j)).unwrap_or(&[0.0; D]);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineInfo {
    pub noop: bool,
    pub refined_cells: usize,
    pub skipped_at_cap: usize,
    pub removed_functions: usize,
}

/// Value, Jacobian (`jac[i][j] = d x_i / d xi_j`) and per-component Hessians of a map.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MapJet {
    pub x: [f64; 2],
    pub jac: [[f64; 2]; 2],
    pub hess: [[[f64; 2]; 2]; 2],
}

impl MapJet {
    pub fn from_basis(pb: &PointBasis, coeffs: &[[f64; 2]]) -> Self {
        let mut m = MapJet::default();
        for (d, jet) in pb.dofs.iter().zip(&pb.jets) {
            let c = coeffs[*d];
            for i in 0..2 {
                m.x[i] += c[i] * jet[0];
                m.jac[i][0] += c[i] * jet[1];
                m.jac[i][1] += c[i] * jet[2];
                m.hess[i][0][0] += c[i] * jet[3];
                m.hess[i][0][1] += c[i] * jet[4];
                m.hess[i][1][1] += c[i] * jet[5];
            }
        }
        for i in 0..2 {
            m.hess[i][1][0] = m.hess[i][0][1];
        }
        m
    }

    pub fn det(&self) -> f64 {
        self.jac[0][0] * self.jac[1][1] - self.jac[0][1] * self.jac[1][0]
    }
}

/// A vector-valued function in a THB space: one 2-vector per DOF.
#[derive(Clone, Debug)]
pub struct GeometryMap {
    pub space: Arc<ThbSpace>,
    pub coeffs: Vec<[f64; 2]>,
}

impl GeometryMap {
    pub fn new(space: Arc<ThbSpace>, coeffs: Vec<[f64; 2]>) -> Result<Self> {
        if coeffs.len() != space.num_dofs() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for a space with {} DOFs",
                coeffs.len(),
                space.num_dofs()
            )));
        }
        Ok(Self { space, coeffs })
    }

    /// Identity map, obtained by projecting `(xi, eta)` (exact: degree >= 1).
    pub fn identity(space: Arc<ThbSpace>) -> Self {
        let coeffs = space.identity_coeffs();
        Self { space, coeffs }
    }

    pub fn eval(&self, xi: f64, eta: f64) -> Result<MapJet> {
        let pb = self.space.eval_point(xi, eta)?;
        Ok(MapJet::from_basis(&pb, &self.coeffs))
    }

    pub fn eval_many(&self, pts: &[[f64; 2]]) -> Result<Vec<MapJet>> {
        pts.iter().map(|p| self.eval(p[0], p[1])).collect()
    }

    /// Coefficients in a finer nested space.
    pub fn prolong(&self, fine: Arc<ThbSpace>) -> Result<GeometryMap> {
        let coeffs = fine.prolong(&self.space, &self.coeffs)?;
        Ok(GeometryMap { space: fine, coeffs })
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().flat_map(|c| c.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}
