//! Command-line front end.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::bench::{
    build_benchmark, concentration_profile, line_profile, pressure_profile, run_benchmark, run_convergence, solve_checked,
    BenchmarkId, BenchmarkRun, FlowChecks,
};
use crate::error::{Error, Result};
use crate::flow::{FlowProblem, FlowSolution, FlowSolver, UniformBoundaryData, DEFAULT_PENALTY};
use crate::geometry::{
    classify_intersections, default_tolerance, BcKind, BoundaryCondition, DomainBoundary, Fracture, IntersectionSets,
    LinearData, Point,
};
use crate::io::{self, Config};
use crate::mesh::{immerse_network, SimplicialMesh, Tensor};
use crate::transport::{run_transport, StepRecord, TransportProblem, TransportState};

#[derive(Debug, Parser)]
#[command(name = "frax", version, about = "Darcy flow and tracer transport in 2D fractured porous media")]
pub struct Cli {
    #[command(subcommand)]
    pub mode: Mode,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of uniform refinements of the level-0 mesh.
    #[arg(long)]
    pub level: Option<usize>,
    /// Built-in benchmark id.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run a convergence study on levels 0..=MAX against level MAX + 1.
    #[arg(long, value_name = "MAX")]
    pub convergence: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Mode {
    /// Solve the flow problem of a configuration.
    Solve(CommonArgs),
    /// Solve flow, then transport.
    Transport(CommonArgs),
    /// Run a built-in benchmark.
    Bench(CommonArgs),
    /// Build (and immerse) a mesh and write it out.
    Mesh(CommonArgs),
}

/// Everything a run needs, resolved from flags and the configuration file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub config: Config,
    pub benchmark: Option<BenchmarkId>,
    pub level: usize,
    pub convergence: Option<usize>,
    pub out: PathBuf,
    pub solver: FlowSolver,
    pub write_vtk: bool,
    pub profiles: Vec<(Point, Point)>,
    pub samples: usize,
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let config = match &args.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        let benchmark = match args.benchmark.as_deref().or(config.get("", "benchmark")) {
            Some(id) => Some(id.parse()?),
            None => None,
        };
        let level = match args.level {
            Some(l) => l,
            None => config.number("", "level")?.unwrap_or(0),
        };
        let convergence = match args.convergence {
            Some(c) => Some(c),
            None => config.number("", "convergence")?,
        };
        let out = args
            .out
            .clone()
            .or_else(|| config.get("output", "dir").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("frax-out"));
        let solver = match config.get("flow", "solver").unwrap_or("cholesky") {
            "cholesky" => FlowSolver::Cholesky,
            "cg" => FlowSolver::Cg {
                tol: config.number("flow", "cg_tol")?.unwrap_or(1e-12),
                max_iter: config.number("flow", "cg_max_iter")?.unwrap_or(100_000),
            },
            other => return Err(Error::Config(format!("unknown solver `{other}`, expected cholesky or cg"))),
        };
        let mut profiles = Vec::new();
        if let Some(spec) = config.get("output", "profiles") {
            for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
                let v: Vec<f64> = part
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::Config(format!("invalid profile `{part}`"))))
                    .collect::<Result<_>>()?;
                if v.len() != 4 {
                    return Err(Error::Config(format!("profile `{part}` needs x0 y0 x1 y1")));
                }
                profiles.push((Point::new(v[0], v[1]), Point::new(v[2], v[3])));
            }
        }
        Ok(Self {
            benchmark,
            level,
            convergence,
            out,
            solver,
            write_vtk: config.flag("output", "vtk")?.unwrap_or(true),
            profiles,
            samples: config.number("output", "samples")?.unwrap_or(101),
            config,
        })
    }
}

fn side_kinds(spec: &str) -> Result<[BcKind; 4]> {
    let kinds: Vec<BcKind> = spec
        .split_whitespace()
        .map(|t| match t {
            "D" => Ok(BcKind::Dirichlet),
            "N" => Ok(BcKind::Neumann),
            _ => Err(Error::Config(format!("boundary kinds must be D or N, got `{t}`"))),
        })
        .collect::<Result<_>>()?;
    kinds.try_into().map_err(|_| Error::Config("boundary needs four kinds: bottom right top left".into()))
}

fn linear(config: &Config, key: &str) -> Result<LinearData> {
    match config.numbers("flow", key)? {
        None => Ok(LinearData::constant(0.0)),
        Some(v) if v.len() == 1 => Ok(LinearData::constant(v[0])),
        Some(v) if v.len() == 3 => Ok(LinearData { c0: v[0], cx: v[1], cy: v[2] }),
        Some(_) => Err(Error::Config(format!("`{key}` takes one value or `c0 cx cy`"))),
    }
}

/// Mesh, fracture network and domain described by the `[flow]` section.
pub struct Setup {
    pub mesh: SimplicialMesh,
    pub network: Vec<Fracture>,
    pub boundary: Option<DomainBoundary>,
    pub tol: f64,
}

pub fn build_setup(config: &Config) -> Result<Setup> {
    let network = match config.path("flow", "fractures")? {
        Some(p) => io::parse_fractures(&io::read_to_string(&p)?)?,
        None => Vec::new(),
    };
    let boundary = match config.numbers("flow", "domain")? {
        Some(d) if d.len() == 4 => {
            let kinds = side_kinds(config.get("flow", "boundary").unwrap_or("N D N D"))?;
            let p_d = linear(config, "dirichlet")?;
            let q_n = linear(config, "neumann")?;
            let conditions = kinds.map(|k| match k {
                BcKind::Dirichlet => BoundaryCondition::dirichlet(p_d),
                BcKind::Neumann => BoundaryCondition::neumann(q_n),
            });
            Some(DomainBoundary::rectangle(d[0], d[1], d[2], d[3], conditions)?)
        }
        Some(_) => return Err(Error::Config("`domain` takes x0 y0 x1 y1".into())),
        None => None,
    };
    let mut mesh = match (config.path("flow", "mesh")?, &boundary) {
        (Some(p), _) => io::parse_mesh(&io::read_to_string(&p)?)?,
        (None, Some(b)) => {
            let (lo, hi) = (b.vertices()[0], b.vertices()[2]);
            let nx = config.number("flow", "nx")?.unwrap_or(16);
            let ny = config.number("flow", "ny")?.unwrap_or(nx);
            SimplicialMesh::rectangle(lo.x, lo.y, hi.x, hi.y, nx, ny)?
        }
        (None, None) => return Err(Error::Config("[flow] needs `mesh` or `domain`".into())),
    };
    let tol = default_tolerance(boundary.as_ref().map_or_else(|| mesh.diameter(), |b| b.diameter()));
    if let Some(b) = &boundary {
        mesh.tag_boundary_from(b, tol)?;
    }
    if config.flag("flow", "immerse")?.unwrap_or(false) {
        mesh = immerse_network(&mesh, &network, tol, |f| f.is_conductive())?;
    }
    for (i, f) in network.iter().enumerate().filter(|(_, f)| f.is_conductive()) {
        mesh.tag_fracture_facets(i, f, tol);
    }
    if let Some(k) = config.number::<f64>("flow", "permeability")? {
        mesh.set_uniform_permeability(Tensor::identity() * k);
    }
    Ok(Setup { mesh, network, boundary, tol })
}

pub fn build_flow(config: &Config) -> Result<(FlowProblem, IntersectionSets)> {
    let setup = build_setup(config)?;
    let has_conductive = setup.network.iter().any(|f| f.is_conductive());
    let sets = match (&setup.boundary, has_conductive) {
        (Some(b), _) => classify_intersections(&setup.network, b, setup.tol)?,
        (None, false) => IntersectionSets::default(),
        (None, true) => {
            return Err(Error::Config("conductive fractures need `domain` to classify their end points".into()))
        }
    };
    let data = UniformBoundaryData { pressure: linear(config, "dirichlet")?, flux: linear(config, "neumann")? };
    let mut problem = FlowProblem::new(setup.mesh, &setup.network, &sets, Arc::new(data), setup.tol)?;
    if let Some(f) = config.number::<f64>("flow", "source")? {
        problem.source.iter_mut().for_each(|s| *s = f);
    }
    problem.penalty = config.number("flow", "penalty")?.unwrap_or(DEFAULT_PENALTY);
    Ok((problem, sets))
}

pub fn build_transport(config: &Config, flow: &FlowProblem) -> Result<TransportProblem> {
    let dt = config.number("transport", "dt")?.ok_or_else(|| Error::Config("[transport] needs `dt`".into()))?;
    let final_time = config
        .number("transport", "final_time")?
        .ok_or_else(|| Error::Config("[transport] needs `final_time`".into()))?;
    let mut tp = TransportProblem::uniform(
        flow,
        config.number("transport", "porosity")?.unwrap_or(0.1),
        config.number("transport", "fracture_porosity")?.unwrap_or(0.9),
        dt,
        final_time,
    );
    if let Some(c) = config.number::<f64>("transport", "initial")? {
        tp.initial.iter_mut().for_each(|v| *v = c);
        tp.initial_skeleton = c;
    }
    tp.inflow = config.number("transport", "inflow")?.unwrap_or(1.0);
    tp.fracture_inflow = config.number("transport", "fracture_inflow")?.unwrap_or(tp.inflow);
    Ok(tp)
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn flow_rows(problem: &FlowProblem, solution: &FlowSolution, checks: &FlowChecks) -> Vec<(f64, String, f64)> {
    let q = |name: &str, v: f64| (0.0, name.to_string(), v);
    vec![
        q("cells", problem.mesh.num_cells() as f64),
        q("facets", problem.mesh.num_facets() as f64),
        q("fracture_segments", problem.fracture_mesh.num_segments() as f64),
        q("dofs", solution.num_dofs as f64),
        q("facet_dofs", checks.facet_dofs as f64),
        q("vertex_dofs", checks.vertex_dofs as f64),
        q("symmetry_defect", checks.symmetry_defect),
        q("max_mass_residual", checks.mass_residual),
        q("solver_residual", solution.report.residual),
    ]
}

fn vtk_fields(problem: &FlowProblem, solution: &FlowSolution, concentration: Option<&[f64]>) -> String {
    let mesh = &problem.mesh;
    let centroid_star: Vec<f64> = solution.postprocessed.iter().map(|p| p.value).collect();
    let speed: Vec<f64> =
        (0..mesh.num_cells()).map(|c| solution.velocity_at(mesh, c, &mesh.centroid(c)).norm()).collect();
    let mut fields: Vec<(&str, &[f64])> =
        vec![("p_h", &solution.cell_pressure), ("p_star", &centroid_star), ("velocity_magnitude", &speed)];
    if let Some(c) = concentration {
        fields.push(("c_h", c));
    }
    io::format_vtk(mesh, &fields)
}

fn series_rows(history: &[StepRecord]) -> Vec<(f64, String, f64)> {
    let mut rows = Vec::with_capacity(4 * history.len());
    for r in history {
        rows.push((r.time, "total_mass".to_string(), r.total_mass));
        rows.push((r.time, "mass_defect".to_string(), r.mass_defect));
        rows.push((r.time, "min".to_string(), r.min));
        rows.push((r.time, "max".to_string(), r.max));
    }
    rows
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    io::write_atomic(&path, contents)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run_solve(rc: &RunConfig, with_transport: bool) -> Result<()> {
    let (problem, _) = build_flow(&rc.config)?;
    let tp = if with_transport { Some(build_transport(&rc.config, &problem)?) } else { None };
    let (solution, checks) = solve_checked(&problem, rc.solver)?;
    println!(
        "flow: {} cells, {} fracture segments, {} dofs, max mass residual {:e}",
        problem.mesh.num_cells(),
        problem.fracture_mesh.num_segments(),
        solution.num_dofs,
        checks.mass_residual
    );
    write(&rc.out, "summary.csv", &io::format_series(&flow_rows(&problem, &solution, &checks)))?;
    for (k, (a, b)) in rc.profiles.iter().enumerate() {
        let post = &solution.postprocessed;
        let rows = line_profile(&problem.mesh, *a, *b, rc.samples, |c, x| post[c].eval(x))?;
        write(&rc.out, &format!("pressure_profile_{k}.csv"), &io::format_profile(&rows))?;
    }
    let mut concentration = None;
    if let Some(tp) = tp {
        let run = run_transport(&tp, &problem, &solution, |_| {})?;
        let last = run.history.last().expect("at least one step");
        println!(
            "transport: {} steps to t = {}, c in [{:e}, {}], worst mass defect {:e}",
            run.history.len(),
            run.state.time,
            last.min,
            last.max,
            run.history.iter().map(|r| r.mass_defect).fold(0.0, f64::max)
        );
        write(&rc.out, "transport.csv", &io::format_series(&series_rows(&run.history)))?;
        for (k, (a, b)) in rc.profiles.iter().enumerate() {
            let c = &run.state.cell;
            let rows = line_profile(&problem.mesh, *a, *b, rc.samples, |cell, _| c[cell])?;
            write(&rc.out, &format!("concentration_profile_{k}.csv"), &io::format_profile(&rows))?;
        }
        concentration = Some(run.state);
    }
    if rc.write_vtk {
        let c = concentration.as_ref().map(|s: &TransportState| s.cell.as_slice());
        write(&rc.out, "fields.vtk", &vtk_fields(&problem, &solution, c))?;
    }
    Ok(())
}

fn run_bench(rc: &RunConfig) -> Result<()> {
    let id = rc.benchmark.ok_or_else(|| Error::Config("bench needs --benchmark or `benchmark =`".into()))?;
    if let Some(max) = rc.convergence {
        let report = run_convergence(id, max, max + 1)?;
        print!("{report}");
        return write(&rc.out, &format!("{id}_convergence.csv"), &report.to_csv());
    }
    let run: BenchmarkRun = run_benchmark(build_benchmark(id, rc.level)?, rc.solver, true)?;
    let problem = &run.benchmark.flow;
    println!(
        "{id} level {}: {} cells, {} fracture segments, {} dofs ({} facet + {} fracture vertex), max mass residual {:e}",
        rc.level,
        problem.mesh.num_cells(),
        problem.fracture_mesh.num_segments(),
        run.solution.num_dofs,
        run.checks.facet_dofs,
        run.checks.vertex_dofs,
        run.checks.mass_residual
    );
    let prefix = format!("{id}_L{}", rc.level);
    write(&rc.out, &format!("{prefix}_summary.csv"), &io::format_series(&flow_rows(problem, &run.solution, &run.checks)))?;
    for line in &run.benchmark.profiles {
        let name = file_safe(line.name);
        write(&rc.out, &format!("{prefix}_pressure_{name}.csv"), &io::format_profile(&pressure_profile(&run, line, rc.samples)?))?;
        if run.transport.is_some() {
            let rows = concentration_profile(&run, line, rc.samples)?;
            write(&rc.out, &format!("{prefix}_concentration_{name}.csv"), &io::format_profile(&rows))?;
        }
    }
    if let Some((_, history)) = &run.transport {
        write(&rc.out, &format!("{prefix}_transport.csv"), &io::format_series(&series_rows(history)))?;
    }
    if rc.write_vtk {
        let c = run.transport.as_ref().map(|(s, _)| s.cell.as_slice());
        write(&rc.out, &format!("{prefix}.vtk"), &vtk_fields(problem, &run.solution, c))?;
    }
    Ok(())
}

fn run_mesh(rc: &RunConfig) -> Result<()> {
    let mesh = match rc.benchmark {
        Some(id) => build_benchmark(id, rc.level)?.flow.mesh,
        None => build_setup(&rc.config)?.mesh,
    };
    println!("mesh: {} vertices, {} cells, {} facets", mesh.num_vertices(), mesh.num_cells(), mesh.num_facets());
    write(&rc.out, "mesh.txt", &io::format_mesh(&mesh))?;
    if rc.write_vtk {
        write(&rc.out, "mesh.vtk", &io::format_vtk(&mesh, &[]))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.mode {
        Mode::Solve(args) => run_solve(&RunConfig::resolve(args)?, false),
        Mode::Transport(args) => run_solve(&RunConfig::resolve(args)?, true),
        Mode::Bench(args) => run_bench(&RunConfig::resolve(args)?),
        Mode::Mesh(args) => run_mesh(&RunConfig::resolve(args)?),
    }
}
