use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use thb_egg::assembly::{build_initial_space, coons_patch, Disc, Tau};
use thb_egg::domopt::{self, ConstraintKind, CostTerm, OrthSides, QualitySpec};
use thb_egg::dwr::{self, AdjointChoice, GoalKind};
use thb_egg::io::{self, GeometryFile, MapFile, ProjectConfig, SvgOptions};
use thb_egg::optim::OptimReport;
use thb_egg::quality::{self, Functional, QualityReport};
use thb_egg::solvers::{self, Method, SolveReport};
use thb_egg::thb::{GeometryMap, ThbSpace};
use thb_egg::{Error, Result};

#[derive(Parser)]
#[command(name = "thb-egg", version, about = "Planar spline parameterization by elliptic grid generation on THB-spline spaces")]
struct Cli {
    /// Project state file written by `init` and updated by later commands.
    #[arg(long, global = true, default_value = "thb-egg.state.json")]
    state: PathBuf,
    /// JSON configuration; replaces the configuration stored in the state.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for randomized probes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print or write a packaged geometry (square, skewed-quad, annulus, horseshoe, tube).
    Geometry {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the initial space and the Coons-patch map from a geometry file or `builtin:<name>`.
    Init {
        geometry: String,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        regularity: Option<usize>,
        #[arg(long)]
        n0: Option<usize>,
        #[arg(long)]
        fit_tol: Option<f64>,
        #[arg(long)]
        max_levels: Option<usize>,
    },
    /// Solve the grid generation equations on the current space.
    Solve {
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        out: ReportFlags,
        /// Residual history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Goal-oriented adaptive refinement loop.
    Adapt {
        #[arg(long)]
        goal: Option<GoalKind>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        adjoint: Option<AdjointChoice>,
        #[arg(long)]
        positive_only: bool,
        /// Winslow goal: stop once |estimate| <= tol * L_W(x_h).
        #[arg(long)]
        winslow_rel_tol: Option<f64>,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        out: ReportFlags,
    },
    /// Reparameterize the parametric domain and recompute the map.
    Reparam {
        #[command(subcommand)]
        kind: ReparamCmd,
    },
    /// Evaluate quality functionals of the current map.
    Quality {
        /// Functionals to evaluate (default: every functional defined for the map).
        #[arg(long = "functional", value_delimiter = ',')]
        functionals: Vec<Functional>,
        /// Restrict the integrals to cells with center in `xi0,xi1,eta0,eta1`.
        #[arg(long, value_delimiter = ',')]
        restrict: Option<Vec<f64>>,
        /// Additional det J check at this many random points.
        #[arg(long)]
        probe: Option<usize>,
        #[command(flatten)]
        out: ReportFlags,
    },
    /// Export the current map.
    Export {
        #[command(subcommand)]
        kind: ExportCmd,
    },
}

#[derive(Subcommand)]
enum ReparamCmd {
    /// Diffusion control map with diffusivity (det J*)^k.
    Maxprinciple {
        #[arg(long)]
        k: Option<f64>,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        out: ReportFlags,
    },
    /// Constrained optimization of the control map.
    Constrained {
        /// Cost terms `name[:weight][:plain]`, e.g. `area` or `area-orthogonality:1:plain`.
        #[arg(long, value_delimiter = ',')]
        cost: Vec<CostTerm>,
        #[arg(long)]
        constraint: Option<ConstraintKind>,
        /// Elements per direction of the tensor space of the control map.
        #[arg(long)]
        control_n: Option<usize>,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        out: ReportFlags,
    },
    /// Boundary orthogonalization, optionally followed by the anisotropic post-processing.
    BoundaryOrth {
        #[arg(long)]
        sides: Option<OrthSides>,
        /// Apply the anisotropic post-processing, optionally with `K BETA`
        /// overriding the configured exponent and sharpness.
        #[arg(long, num_args = 0..=2, value_names = ["K", "BETA"])]
        sprime: Option<Vec<f64>>,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        out: ReportFlags,
    },
}

#[derive(Subcommand)]
enum ExportCmd {
    Svg {
        #[arg(long)]
        out: PathBuf,
        /// Isolines per direction, `n_xi,n_eta`.
        #[arg(long, value_delimiter = ',')]
        isolines: Option<Vec<usize>>,
        #[arg(long)]
        samples: Option<usize>,
        /// Overlay the element boundaries.
        #[arg(long)]
        elements: bool,
    },
    /// The map (space and coefficients) as JSON.
    Json {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Default)]
struct SolverFlags {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    tau: Option<Tau>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol_residual: Option<f64>,
    #[arg(long)]
    tol_increment: Option<f64>,
}

#[derive(Args)]
struct ReportFlags {
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Everything later commands need, persisted between invocations.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct State {
    geometry: GeometryFile,
    config: ProjectConfig,
    map: MapFile,
    /// Map the reparameterizations start from.
    base: Option<MapFile>,
    control: Option<MapFile>,
}

impl SolverFlags {
    fn apply(&self, c: &mut solvers::SolverConfig) {
        if let Some(m) = self.method {
            c.method = m;
        }
        if let Some(t) = self.tau {
            c.tau = t;
        }
        if let Some(v) = self.mu {
            c.mu = v;
        }
        if let Some(v) = self.max_iters {
            c.max_iters = v;
        }
        if let Some(v) = self.tol_residual {
            c.tol_residual = v;
        }
        if let Some(v) = self.tol_increment {
            c.tol_increment = v;
        }
    }
}

/// Outcome of a command: converged or not.
enum Outcome {
    Done,
    NotConverged(String),
}

fn emit<T: Serialize>(out: &ReportFlags, v: &T) -> Result<()> {
    match &out.report {
        Some(p) => io::save_json(p, v),
        None => {
            print!("{}", io::to_json_string(v)?);
            Ok(())
        }
    }
}

fn load_state(path: &Path) -> Result<State> {
    if !path.exists() {
        return Err(Error::Config(format!("no state at {}; run `init` first", path.display())));
    }
    io::read_json(path)
}

fn config_for(cli: &Cli, stored: Option<ProjectConfig>) -> Result<ProjectConfig> {
    let mut c = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => stored.unwrap_or_default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn solve_summary(r: &SolveReport) {
    eprintln!(
        "{:?}: converged {} in {} iterations, residual {:.3e}, min det J {:.3e}, {} DOFs, {:.2} s",
        r.method, r.converged, r.iterations, r.final_residual, r.min_det, r.num_dofs, r.wall_time_s
    );
    for n in &r.notes {
        eprintln!("note: {n}");
    }
}

#[derive(Serialize)]
struct ReparamReport<'a> {
    kind: &'a str,
    optimization: Option<OptimReport>,
    solve: SolveReport,
    warnings: Vec<String>,
    quality_before: QualityReport,
    quality_after: QualityReport,
}

fn reparam(cli: &Cli, kind: &ReparamCmd) -> Result<Outcome> {
    let mut st = load_state(&cli.state)?;
    let mut cfg = config_for(cli, Some(st.config.clone()))?;
    let (solver_flags, out) = match kind {
        ReparamCmd::Maxprinciple { solver, out, .. }
        | ReparamCmd::Constrained { solver, out, .. }
        | ReparamCmd::BoundaryOrth { solver, out, .. } => (solver, out),
    };
    solver_flags.apply(&mut cfg.solver);
    cfg.validate()?;
    let x_star = st.base.as_ref().unwrap_or(&st.map).to_map()?;
    let disc = Disc::new(x_star.space.clone());
    let (min_det, _) = quality::bijectivity_scan(&disc, &x_star.coeffs);
    if !(min_det > 0.0) {
        return Err(Error::NotBijective(format!(
            "reparameterization needs a bijective base map (min det J = {min_det:e}); run solve or adapt first"
        )));
    }
    let (degree, regularity, n0) = (cfg.degree, cfg.regularity(), cfg.n0);
    let d = &mut cfg.domopt;
    let mut optimization = None;
    let (name, s) = match kind {
        ReparamCmd::Maxprinciple { k, .. } => {
            if let Some(k) = k {
                d.k = *k;
            }
            ("maxprinciple", domopt::maxprinciple_reparam(&x_star, d.k, x_star.space.clone())?)
        }
        ReparamCmd::Constrained { cost, constraint, control_n, .. } => {
            if !cost.is_empty() {
                d.cost = cost.clone();
            }
            if let Some(c) = constraint {
                d.constraint = *c;
            }
            let n = control_n.unwrap_or(n0);
            let space_s = Arc::new(ThbSpace::uniform(degree, regularity, n)?);
            let spec = QualitySpec { terms: d.cost.clone() };
            let (s, rep) = domopt::optimize_domain(&x_star, &spec, d.constraint, space_s, &d.optimization)?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            optimization = Some(rep);
            ("constrained", s)
        }
        ReparamCmd::BoundaryOrth { sides, sprime, .. } => {
            if let Some(s) = sides {
                d.orth_sides = *s;
            }
            match sprime.as_deref() {
                Some([]) | None => {}
                Some([k, beta]) => {
                    d.sprime_k = *k;
                    d.sprime_beta = *beta;
                }
                Some(_) => return Err(Error::InvalidArgument("--sprime takes no value or `K BETA`".into())),
            }
            let s = domopt::boundary_orth_pipeline(&x_star, d.orth_sides, x_star.space.clone())?;
            if sprime.is_some() {
                let (x_h, r) = domopt::recompute(&disc, &x_star, &s, &cfg.solver)?;
                solve_summary(&r);
                ("boundary-orth+sprime", domopt::sprime_postprocess(&s, &x_h, d.sprime_k, d.sprime_beta)?)
            } else {
                ("boundary-orth", s)
            }
        }
    };
    let (x, rep) = domopt::recompute(&disc, &x_star, &s, &cfg.solver)?;
    solve_summary(&rep);
    let which: Vec<Functional> = Functional::ALL.to_vec();
    let quality_before = quality::evaluate(&disc, &x_star.coeffs, &which, None)?;
    let quality_after = quality::evaluate(&disc, &x.coeffs, &defined_functionals(&disc, &x, &which), None)?;
    let converged = rep.converged;
    let mut warnings = Vec::new();
    if !(quality_after.min_det > 0.0) {
        warnings.push(format!(
            "recomputed map is not bijective (min det J = {:e}, {} negative points); refine the base space",
            quality_after.min_det, quality_after.num_negative
        ));
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let report = ReparamReport { kind: name, optimization, solve: rep, warnings, quality_before, quality_after };
    emit(out, &report)?;
    st.base = Some(MapFile::from_map(&x_star));
    st.control = Some(MapFile::from_map(&s.map));
    st.map = MapFile::from_map(&x);
    st.config = cfg;
    io::save_json(&cli.state, &st)?;
    Ok(if converged { Outcome::Done } else { Outcome::NotConverged("recomputation did not converge".into()) })
}

fn defined_functionals(disc: &Disc, x: &GeometryMap, which: &[Functional]) -> Vec<Functional> {
    let (min_det, _) = quality::bijectivity_scan(disc, &x.coeffs);
    which
        .iter()
        .copied()
        .filter(|f| !(f.needs_bijective() && min_det <= 0.0))
        .filter(|f| !(*f == Functional::Uniformity && x.space.regularity() < 1))
        .collect()
}

#[derive(Serialize)]
struct QualityOutput {
    quality: QualityReport,
    probe: Option<Probe>,
}

#[derive(Serialize)]
struct Probe {
    samples: usize,
    seed: u64,
    min_det: f64,
    num_negative: usize,
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.cmd {
        Cmd::Geometry { name, out } => {
            let g = io::builtin(name).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown geometry '{name}' (expected one of {})", io::BUILTINS.join(", ")))
            })?;
            match out {
                Some(p) => io::save_json(p, &g)?,
                None => print!("{}", io::to_json_string(&g)?),
            }
            Ok(Outcome::Done)
        }
        Cmd::Init { geometry, degree, regularity, n0, fit_tol, max_levels } => {
            let mut cfg = config_for(cli, None)?;
            if let Some(v) = degree {
                cfg.degree = *v;
            }
            if regularity.is_some() {
                cfg.regularity = *regularity;
            }
            if let Some(v) = n0 {
                cfg.n0 = *v;
            }
            if let Some(v) = fit_tol {
                cfg.fit_tol = *v;
            }
            if let Some(v) = max_levels {
                cfg.max_levels = *v;
            }
            cfg.validate()?;
            let g = io::resolve_geometry(geometry)?;
            let b = g.to_boundary()?;
            let space = build_initial_space(cfg.degree, cfg.regularity(), cfg.n0, &b, cfg.fit_tol, cfg.max_levels)?;
            let disc = Disc::new(Arc::new(space));
            let x = coons_patch(&disc, &b)?;
            let (min_det, neg) = quality::bijectivity_scan(&disc, &x.coeffs);
            eprintln!(
                "initial space: {} DOFs, {} cells; Coons patch min det J {:.3e} ({} negative points)",
                disc.space.num_dofs(),
                disc.space.num_cells(),
                min_det,
                neg.len()
            );
            let st = State { geometry: g, config: cfg, map: MapFile::from_map(&x), base: None, control: None };
            io::save_json(&cli.state, &st)?;
            Ok(Outcome::Done)
        }
        Cmd::Solve { solver, out, history } => {
            let mut st = load_state(&cli.state)?;
            let mut cfg = config_for(cli, Some(st.config.clone()))?;
            solver.apply(&mut cfg.solver);
            cfg.validate()?;
            let x0 = st.map.to_map()?;
            let disc = Disc::new(x0.space.clone());
            let (x, rep) = solvers::solve(&disc, &x0, &cfg.solver, None)?;
            solve_summary(&rep);
            if let Some(p) = history {
                std::fs::write(p, rep.history_csv())?;
            }
            emit(out, &rep)?;
            st.map = MapFile::from_map(&x);
            st.base = None;
            st.control = None;
            st.config = cfg;
            io::save_json(&cli.state, &st)?;
            Ok(if rep.converged { Outcome::Done } else { Outcome::NotConverged(format!("{:?} did not converge", rep.method)) })
        }
        Cmd::Adapt { goal, beta, rounds, adjoint, positive_only, winslow_rel_tol, solver, out } => {
            let mut st = load_state(&cli.state)?;
            let mut cfg = config_for(cli, Some(st.config.clone()))?;
            let a = &mut cfg.adapt;
            if let Some(v) = goal {
                a.goal = *v;
            }
            if let Some(v) = beta {
                a.beta = *v;
            }
            if let Some(v) = rounds {
                a.max_rounds = *v;
            }
            if let Some(v) = adjoint {
                a.adjoint = *v;
            }
            if *positive_only {
                a.positive_only = true;
            }
            if let Some(v) = winslow_rel_tol {
                a.winslow_rel_tol = *v;
            }
            solver.apply(&mut a.solver);
            cfg.validate()?;
            let b = st.geometry.to_boundary()?;
            let x0 = st.map.to_map()?;
            let (x, rep, _) = dwr::adapt_loop(&x0, &b, &cfg.adapt)?;
            for r in &rep.rounds {
                eprintln!(
                    "round {}: {} DOFs, {} negative points, min det J {:.3e}, marked {}",
                    r.round,
                    r.num_dofs,
                    r.num_negative,
                    r.min_det,
                    r.marked.len()
                );
            }
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            emit(out, &rep)?;
            st.map = MapFile::from_map(&x);
            st.base = None;
            st.control = None;
            st.config = cfg;
            io::save_json(&cli.state, &st)?;
            Ok(if rep.success {
                Outcome::Done
            } else {
                Outcome::NotConverged(rep.diagnostic.clone().unwrap_or_else(|| "goal not reached".into()))
            })
        }
        Cmd::Reparam { kind } => reparam(cli, kind),
        Cmd::Quality { functionals, restrict, probe, out } => {
            let st = load_state(&cli.state)?;
            let cfg = config_for(cli, Some(st.config.clone()))?;
            let x = st.map.to_map()?;
            let disc = Disc::new(x.space.clone());
            let which = if functionals.is_empty() {
                defined_functionals(&disc, &x, &Functional::ALL)
            } else {
                functionals.clone()
            };
            let restrict = match restrict.as_deref() {
                None => None,
                Some(&[a, b, c, d]) => Some([a, b, c, d]),
                Some(_) => return Err(Error::InvalidArgument("--restrict takes xi0,xi1,eta0,eta1".into())),
            };
            let q = quality::evaluate(&disc, &x.coeffs, &which, restrict)?;
            eprint!("{}", q.table());
            let probe = match probe {
                Some(n) => {
                    let (min_det, num_negative) = quality::probe_det(&x, *n, cfg.seed)?;
                    Some(Probe { samples: *n, seed: cfg.seed, min_det, num_negative })
                }
                None => None,
            };
            emit(out, &QualityOutput { quality: q, probe })?;
            Ok(Outcome::Done)
        }
        Cmd::Export { kind } => {
            let st = load_state(&cli.state)?;
            let cfg = config_for(cli, Some(st.config.clone()))?;
            match kind {
                ExportCmd::Svg { out, isolines, samples, elements } => {
                    let mut o = SvgOptions::from(&cfg.export);
                    match isolines.as_deref() {
                        None => {}
                        Some(&[a, b]) => o.isolines = [a, b],
                        Some(_) => return Err(Error::InvalidArgument("--isolines takes n_xi,n_eta".into())),
                    }
                    if let Some(v) = samples {
                        o.samples = *v;
                    }
                    o.elements |= *elements;
                    io::export_svg(&st.map.to_map()?, &o, out)?;
                }
                ExportCmd::Json { out } => io::save_json(out, &st.map)?,
            }
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged(m)) => {
            eprintln!("not converged: {m}");
            ExitCode::from(2)
        }
        Err(Error::NotConverged(m)) => {
            eprintln!("error: solver did not converge: {m}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
