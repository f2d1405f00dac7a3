//! File formats: boundary geometry, maps, project configuration, SVG.
//!
//! Geometry files list the four sides counterclockwise:
//!
//! ```json
//! {"sides": {"south": {"degree": 1, "knots": [0, 0, 1, 1], "cps": [[0, 0], [1, 0]]},
//!            "east": ..., "north": ..., "west": ...}}
//! ```
//!
//! so `north` runs from the north-east to the north-west corner and `west`
//! from north-west to south-west. Floats are written in shortest round-trip
//! form, which reproduces every value bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryData, Side, SplineCurve};
use crate::domopt::{ConstraintKind, CostTerm, OptimizationConfig, OrthSides};
use crate::dwr::AdaptConfig;
use crate::error::{Error, Result};
use crate::quality::Functional;
use crate::solvers::SolverConfig;
use crate::thb::{GeometryMap, HierarchicalMesh, ThbSpace, DEFAULT_MAX_LEVELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideFile {
    pub degree: usize,
    pub knots: Vec<f64>,
    pub cps: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidesFile {
    pub south: SideFile,
    pub east: SideFile,
    pub north: SideFile,
    pub west: SideFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryFile {
    pub sides: SidesFile,
}

impl SideFile {
    fn from_curve(c: &SplineCurve) -> Self {
        Self { degree: c.kv.degree(), knots: c.kv.knots().to_vec(), cps: c.cps.clone() }
    }

    fn to_curve(&self, path: &str) -> Result<SplineCurve> {
        if self.knots.first() != Some(&0.0) || self.knots.last() != Some(&1.0) {
            return Err(Error::Config(format!("{path}.knots: side must be parameterized over [0, 1]")));
        }
        SplineCurve::new(self.degree, self.knots.clone(), self.cps.clone()).map_err(|e| match e {
            Error::InvalidKnots(m) => Error::Config(format!("{path}.knots: {m}")),
            Error::InvalidArgument(m) => Error::Config(format!("{path}.cps: {m}")),
            e => e,
        })
    }
}

impl GeometryFile {
    /// Internally oriented boundary; corner gaps above tolerance are errors.
    pub fn to_boundary(&self) -> Result<BoundaryData> {
        let s = &self.sides;
        BoundaryData::new(
            s.south.to_curve("sides.south")?,
            s.east.to_curve("sides.east")?,
            s.north.to_curve("sides.north")?.reversed(),
            s.west.to_curve("sides.west")?.reversed(),
        )
    }

    pub fn from_boundary(b: &BoundaryData) -> Self {
        Self {
            sides: SidesFile {
                south: SideFile::from_curve(&b.south),
                east: SideFile::from_curve(&b.east),
                north: SideFile::from_curve(&b.north.reversed()),
                west: SideFile::from_curve(&b.west.reversed()),
            },
        }
    }
}

/// Deserialize with the JSON path of the offending field in the error.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, to_json_string(v)?)?;
    Ok(())
}

pub fn read_geometry(path: &Path) -> Result<GeometryFile> {
    read_json(path)
}

pub fn load_geometry(path: &Path) -> Result<BoundaryData> {
    read_geometry(path)?.to_boundary()
}

/// Serialized THB map: the mesh is stored as its list of refined cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFile {
    pub degree: usize,
    pub regularity: usize,
    pub n0: usize,
    pub max_levels: usize,
    pub refined: Vec<[usize; 3]>,
    pub coeffs: Vec<[f64; 2]>,
}

impl MapFile {
    pub fn from_map(x: &GeometryMap) -> Self {
        let m = x.space.mesh();
        Self {
            degree: x.space.degree(),
            regularity: x.space.regularity(),
            n0: m.n0(),
            max_levels: m.max_levels(),
            refined: m.refined_cells().into_iter().map(|(l, i, j)| [l, i, j]).collect(),
            coeffs: x.coeffs.clone(),
        }
    }

    pub fn space(&self) -> Result<ThbSpace> {
        let cells: Vec<_> = self.refined.iter().map(|c| (c[0], c[1], c[2])).collect();
        let mesh = HierarchicalMesh::from_refined(self.n0, self.max_levels, &cells)?;
        ThbSpace::new(self.degree, self.regularity, mesh)
    }

    pub fn to_map(&self) -> Result<GeometryMap> {
        GeometryMap::new(Arc::new(self.space()?), self.coeffs.clone())
    }

    /// Rebuild on an already constructed space with the same mesh.
    pub fn to_map_on(&self, space: Arc<ThbSpace>) -> Result<GeometryMap> {
        GeometryMap::new(space, self.coeffs.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomoptSettings {
    /// Exponent of the maximum-principle diffusivity.
    pub k: f64,
    pub cost: Vec<CostTerm>,
    pub constraint: ConstraintKind,
    pub orth_sides: OrthSides,
    pub sprime_k: f64,
    pub sprime_beta: f64,
    pub optimization: OptimizationConfig,
}

impl Default for DomoptSettings {
    fn default() -> Self {
        Self {
            k: 1.0,
            cost: vec![CostTerm::new(Functional::Area)],
            constraint: ConstraintKind::Cone,
            orth_sides: OrthSides::default(),
            sprime_k: 0.75,
            sprime_beta: 300.0,
            optimization: OptimizationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Isolines per direction.
    pub isolines: [usize; 2],
    pub samples: usize,
    pub elements: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { isolines: [11, 11], samples: 64, elements: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    pub degree: usize,
    /// Defaults to `degree - 1`.
    pub regularity: Option<usize>,
    pub n0: usize,
    pub fit_tol: f64,
    pub max_levels: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub adapt: AdaptConfig,
    pub domopt: DomoptSettings,
    pub export: ExportConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            regularity: None,
            n0: 4,
            fit_tol: 1e-2,
            max_levels: DEFAULT_MAX_LEVELS,
            seed: 0,
            solver: SolverConfig::default(),
            adapt: AdaptConfig::default(),
            domopt: DomoptSettings::default(),
            export: ExportConfig::default(),
        }
    }
}

impl ProjectConfig {
    pub fn regularity(&self) -> usize {
        self.regularity.unwrap_or(self.degree.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.regularity() >= self.degree {
            return Err(Error::Config(format!(
                "need degree >= 1 and regularity < degree, got ({}, {})",
                self.degree,
                self.regularity()
            )));
        }
        if !(self.fit_tol > 0.0) {
            return Err(Error::Config("fit_tol must be positive".into()));
        }
        if self.export.samples < 64 {
            return Err(Error::Config("export.samples must be at least 64".into()));
        }
        self.solver.validate()?;
        self.adapt.solver.validate()
    }
}

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 5] = ["square", "skewed-quad", "annulus", "horseshoe", "tube"];

fn line(a: [f64; 2], b: [f64; 2]) -> SideFile {
    SideFile { degree: 1, knots: vec![0.0, 0.0, 1.0, 1.0], cps: vec![a, b] }
}

fn quad_file(sw: [f64; 2], se: [f64; 2], ne: [f64; 2], nw: [f64; 2]) -> GeometryFile {
    GeometryFile { sides: SidesFile { south: line(sw, se), east: line(se, ne), north: line(ne, nw), west: line(nw, sw) } }
}

/// Cubic least-squares fit of a counterclockwise side.
fn fitted(f: impl Fn(f64) -> [f64; 2], n_el: usize) -> SideFile {
    SideFile::from_curve(&SplineCurve::fit(f, 3, n_el).expect("cubic fit of a smooth side"))
}

/// Horseshoe of width 5 and height 4 with legs and base 0.6 thick; the
/// notch enters from the north side.
fn horseshoe() -> GeometryFile {
    let (w, h, t, d) = (5.0, 4.0, 0.6, 0.6);
    let mut knots = vec![0.0; 3];
    knots.extend((1..6).map(|i| i as f64 / 6.0));
    knots.extend([1.0; 3]);
    let north = SideFile {
        degree: 2,
        knots,
        cps: vec![[w, h], [w - t / 2.0, h], [w - t, h], [w - t, d], [t, d], [t, h], [t / 2.0, h], [0.0, h]],
    };
    GeometryFile {
        sides: SidesFile { south: line([0.0, 0.0], [w, 0.0]), east: line([w, 0.0], [w, h]), north, west: line([0.0, h], [0.0, 0.0]) },
    }
}

/// Channel of length 4 between `y = a sin(pi x)` and `1 + a sin(pi x)`.
fn tube() -> GeometryFile {
    let a = 0.3;
    let pi = std::f64::consts::PI;
    let wall = move |x: f64| a * (pi * x).sin();
    GeometryFile {
        sides: SidesFile {
            south: fitted(|t| [4.0 * t, wall(4.0 * t)], 32),
            east: line([4.0, wall(4.0)], [4.0, 1.0 + wall(4.0)]),
            north: fitted(|t| [4.0 * (1.0 - t), 1.0 + wall(4.0 * (1.0 - t))], 32),
            west: line([0.0, 1.0 + wall(0.0)], [0.0, wall(0.0)]),
        },
    }
}

/// Quarter annulus `1 <= r <= 2` in the orientation of the exact test map.
fn annulus() -> GeometryFile {
    let b = crate::boundary::AnnulusSector;
    use crate::boundary::BoundaryCurves;
    let f = |s: Side, rev: bool| fitted(move |t| b.eval(s, if rev { 1.0 - t } else { t }), 16);
    GeometryFile {
        sides: SidesFile {
            south: f(Side::South, false),
            east: f(Side::East, false),
            north: f(Side::North, true),
            west: f(Side::West, true),
        },
    }
}

pub fn builtin(name: &str) -> Option<GeometryFile> {
    match name {
        "square" => Some(quad_file([0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0])),
        "skewed-quad" => Some(quad_file([0.0, 0.0], [2.0, 0.3], [2.5, 2.0], [0.4, 1.5])),
        "annulus" => Some(annulus()),
        "horseshoe" => Some(horseshoe()),
        "tube" => Some(tube()),
        _ => None,
    }
}

/// Geometry from a path, or `builtin:<name>`.
pub fn resolve_geometry(spec: &str) -> Result<GeometryFile> {
    match spec.strip_prefix("builtin:") {
        Some(name) => builtin(name).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown builtin '{name}' (expected one of {})", BUILTINS.join(", ")))
        }),
        None => read_geometry(Path::new(spec)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvgOptions {
    pub isolines: [usize; 2],
    pub samples: usize,
    pub elements: bool,
}

impl From<&ExportConfig> for SvgOptions {
    fn from(c: &ExportConfig) -> Self {
        Self { isolines: c.isolines, samples: c.samples, elements: c.elements }
    }
}

fn levels(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn polyline_points(x: &GeometryMap, pts: impl Iterator<Item = [f64; 2]>) -> Result<String> {
    let mut s = String::new();
    for (k, p) in pts.enumerate() {
        let q = x.eval(p[0], p[1])?.x;
        if k > 0 {
            s.push(' ');
        }
        write!(s, "{:.6},{:.6}", q[0], -q[1]).expect("write to string");
    }
    Ok(s)
}

/// SVG drawing of the `xi`- and `eta`-isolines of `x`; `y` points up.
pub fn svg_string(x: &GeometryMap, opts: &SvgOptions) -> Result<String> {
    if opts.samples < 64 {
        return Err(Error::InvalidArgument("at least 64 samples per isoline".into()));
    }
    let ns = opts.samples;
    let ts: Vec<f64> = (0..ns).map(|k| k as f64 / (ns - 1) as f64).collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in &x.coeffs {
        for i in 0..2 {
            lo[i] = lo[i].min(c[i]);
            hi[i] = hi[i].max(c[i]);
        }
    }
    let pad = 0.02 * (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).ok();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.6} {:.6} {:.6} {:.6}" width="800" height="{:.0}">"#,
        lo[0] - pad,
        -hi[1] - pad,
        hi[0] - lo[0] + 2.0 * pad,
        hi[1] - lo[1] + 2.0 * pad,
        800.0 * (hi[1] - lo[1] + 2.0 * pad) / (hi[0] - lo[0] + 2.0 * pad)
    )
    .ok();
    let style = r#"fill="none" vector-effect="non-scaling-stroke""#;
    if opts.elements {
        writeln!(s, r##"<g class="elements" stroke="#bbbbbb" stroke-width="0.5" {style}>"##).ok();
        let m = 16;
        for c in x.space.cells() {
            let [x0, x1, y0, y1] = c.bounds;
            let edge: Vec<[f64; 2]> = (0..=m)
                .map(|k| [x0 + (x1 - x0) * k as f64 / m as f64, y0])
                .chain((1..=m).map(|k| [x1, y0 + (y1 - y0) * k as f64 / m as f64]))
                .chain((1..=m).map(|k| [x1 - (x1 - x0) * k as f64 / m as f64, y1]))
                .chain((1..=m).map(|k| [x0, y1 - (y1 - y0) * k as f64 / m as f64]))
                .collect();
            writeln!(s, r#"<path d="M {} Z"/>"#, polyline_points(x, edge.into_iter())?.replace(' ', " L ")).ok();
        }
        writeln!(s, "</g>").ok();
    }
    writeln!(s, r##"<g class="xi" stroke="#1f4e9c" stroke-width="1" {style}>"##).ok();
    for u in levels(opts.isolines[0]) {
        writeln!(s, r#"<polyline points="{}"/>"#, polyline_points(x, ts.iter().map(|&t| [u, t]))?).ok();
    }
    writeln!(s, "</g>").ok();
    writeln!(s, r##"<g class="eta" stroke="#b5301b" stroke-width="1" {style}>"##).ok();
    for v in levels(opts.isolines[1]) {
        writeln!(s, r#"<polyline points="{}"/>"#, polyline_points(x, ts.iter().map(|&t| [t, v]))?).ok();
    }
    writeln!(s, "</g>").ok();
    writeln!(s, "</svg>").ok();
    Ok(s)
}

pub fn export_svg(x: &GeometryMap, opts: &SvgOptions, path: &Path) -> Result<()> {
    std::fs::write(path, svg_string(x, opts)?)?;
    Ok(())
}
