//! Built-in benchmark problems, solution checks, line profiles and the
//! mesh-refinement convergence driver.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::flow::{assemble_cell, condense, local_mass_residual, recover, solve_condensed, FlowProblem, FlowSolution, FlowSolver};
use crate::geometry::{
    classify_intersections, default_tolerance, BoundaryCondition, DomainBoundary, Fracture, IntersectionSets,
    LinearData, Point,
};
use crate::io::{parse_fractures, ProfileSample};
use crate::mesh::{immerse_network, refine_uniform, CellLocator, SimplicialMesh, Tensor};
use crate::transport::{run_transport, StepRecord, TransportProblem, TransportState};

/// Time step of the transport reference solution in convergence studies.
pub const REFERENCE_DT: f64 = 3.125e-5;

/// Environment variable naming the fracture file of the Sotra outcrop.
pub const SOTRA_ENV: &str = "FRAX_SOTRA_FRACTURES";

const REGULAR2D: &str = include_str!("../data/regular2d.frac");
const COMPLEX2D: &str = include_str!("../data/complex2d.frac");
const HYDROCOIN: &str = include_str!("../data/hydrocoin.frac");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchmarkId {
    Hydrocoin,
    Regular2dConductive,
    Regular2dBlocking,
    /// Blocking network on a background mesh that ignores the fractures.
    Regular2dBlockingUnfitted,
    /// Complex network, pressure drop from top to bottom.
    Complex2d,
    /// Complex network, pressure drop from left to right.
    Complex2dHorizontal,
    Sotra2d,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 7] = [
        Self::Hydrocoin,
        Self::Regular2dConductive,
        Self::Regular2dBlocking,
        Self::Regular2dBlockingUnfitted,
        Self::Complex2d,
        Self::Complex2dHorizontal,
        Self::Sotra2d,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Hydrocoin => "hydrocoin",
            Self::Regular2dConductive => "regular2d-conductive",
            Self::Regular2dBlocking => "regular2d-blocking",
            Self::Regular2dBlockingUnfitted => "regular2d-blocking-unfitted",
            Self::Complex2d => "complex2d",
            Self::Complex2dHorizontal => "complex2d-horizontal",
            Self::Sotra2d => "sotra2d",
        }
    }

    /// The benchmark whose fine solution serves as reference in convergence studies.
    pub fn reference(&self) -> Self {
        match self {
            Self::Regular2dBlockingUnfitted => Self::Regular2dBlocking,
            other => *other,
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|id| id.as_str() == s).ok_or_else(|| Error::UnknownBenchmark(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileLine {
    pub name: &'static str,
    pub start: Point,
    pub end: Point,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub id: BenchmarkId,
    pub level: usize,
    pub network: Vec<Fracture>,
    pub sets: IntersectionSets,
    pub boundary: DomainBoundary,
    pub flow: FlowProblem,
    pub transport: Option<TransportProblem>,
    pub profiles: Vec<ProfileLine>,
    /// Range the pressure must stay in by the maximum principle.
    pub pressure_range: (f64, f64),
}

fn line(name: &'static str, x0: f64, y0: f64, x1: f64, y1: f64) -> ProfileLine {
    ProfileLine { name, start: Point::new(x0, y0), end: Point::new(x1, y1) }
}

fn refine_times(mut mesh: SimplicialMesh, level: usize) -> SimplicialMesh {
    for _ in 0..level {
        mesh = refine_uniform(&mesh);
    }
    mesh
}

fn assemble(
    id: BenchmarkId,
    level: usize,
    mut mesh: SimplicialMesh,
    network: Vec<Fracture>,
    boundary: DomainBoundary,
    permeability: f64,
) -> Result<(FlowProblem, IntersectionSets, DomainBoundary, Vec<Fracture>)> {
    let tol = default_tolerance(boundary.diameter());
    mesh.set_uniform_permeability(Tensor::identity() * permeability);
    mesh.tag_boundary_from(&boundary, tol)?;
    for (i, f) in network.iter().enumerate().filter(|(_, f)| f.is_conductive()) {
        mesh.tag_fracture_facets(i, f, tol);
    }
    let sets = classify_intersections(&network, &boundary, tol)?;
    let flow = FlowProblem::new(mesh, &network, &sets, Arc::new(boundary.clone()), tol)?;
    log::info!(
        "{id} level {level}: {} cells, {} fracture segments",
        flow.mesh.num_cells(),
        flow.fracture_mesh.num_segments()
    );
    Ok((flow, sets, boundary, network))
}

/// Grid lines of the fitted level-0 mesh of the regular network.
pub fn regular2d_grid_lines() -> Vec<f64> {
    let mut xs = Vec::new();
    for (a, b, n) in [(0.0, 0.5, 13), (0.5, 0.625, 3), (0.625, 0.75, 3), (0.75, 1.0, 7)] {
        for i in 0..n {
            xs.push(a + (b - a) * i as f64 / n as f64);
        }
    }
    xs.push(1.0);
    xs
}

/// Uniform `n × n` grid of the unit square whose interior vertices are
/// moved by up to `amplitude · h` in each direction. The seed is fixed so
/// the mesh is reproducible.
pub fn jittered_unit_square(n: usize, amplitude: f64, seed: u64) -> Result<SimplicialMesh> {
    use rand::{Rng, SeedableRng};
    let grid = SimplicialMesh::rectangle(0., 0., 1., 1., n, n)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1.0 / n as f64;
    let vertices = grid
        .vertices()
        .iter()
        .map(|p| {
            let (dx, dy) = (rng.gen_range(-amplitude..=amplitude), rng.gen_range(-amplitude..=amplitude));
            let interior = |v: f64| v > 0.5 * h && v < 1.0 - 0.5 * h;
            Point::new(
                if interior(p.x) { p.x + dx * h } else { p.x },
                if interior(p.y) { p.y + dy * h } else { p.y },
            )
        })
        .collect();
    SimplicialMesh::new(vertices, grid.cells().to_vec())
}

fn regular2d(id: BenchmarkId, level: usize) -> Result<Benchmark> {
    let mut network = parse_fractures(REGULAR2D)?;
    if id != BenchmarkId::Regular2dConductive {
        network = network
            .iter()
            .map(|f| Fracture::blocking(f.a, f.b, f.thickness, 1e-4))
            .collect::<Result<_>>()?;
    }
    let no_flow = BoundaryCondition::no_flow();
    let boundary = DomainBoundary::rectangle(
        0.,
        0.,
        1.,
        1.,
        [
            no_flow,
            BoundaryCondition::dirichlet(LinearData::constant(1.0)),
            no_flow,
            BoundaryCondition::neumann(LinearData::constant(-1.0)),
        ],
    )?;
    let base = if id == BenchmarkId::Regular2dBlockingUnfitted {
        jittered_unit_square(27, 0.3, 7)?
    } else {
        let xs = regular2d_grid_lines();
        SimplicialMesh::tensor_grid(&xs, &xs)?
    };
    let mesh = refine_times(base, level);
    let (flow, sets, boundary, network) = assemble(id, level, mesh, network, boundary, 1.0)?;
    let dt = 5e-3 / f64::powi(2.0, level as i32);
    let transport = TransportProblem::uniform(&flow, 0.1, 0.9, dt, 0.1);
    let mut profiles = vec![line("y=0.7", 0., 0.7, 1., 0.7), line("x=0.5", 0.5, 0., 0.5, 1.)];
    if id != BenchmarkId::Regular2dConductive {
        profiles.push(line("diagonal", 0., 0.1, 0.9, 1.0));
    }
    Ok(Benchmark {
        id,
        level,
        network,
        sets,
        boundary,
        flow,
        transport: Some(transport),
        profiles,
        pressure_range: (f64::NEG_INFINITY, f64::INFINITY),
    })
}

fn complex2d(id: BenchmarkId, level: usize) -> Result<Benchmark> {
    let network = parse_fractures(COMPLEX2D)?;
    let high = BoundaryCondition::dirichlet(LinearData::constant(4.0));
    let low = BoundaryCondition::dirichlet(LinearData::constant(1.0));
    let n = BoundaryCondition::no_flow();
    let conditions = if id == BenchmarkId::Complex2d { [low, n, high, n] } else { [n, low, n, high] };
    let boundary = DomainBoundary::rectangle(0., 0., 1., 1., conditions)?;
    let tol = default_tolerance(boundary.diameter());
    let background = SimplicialMesh::rectangle(0., 0., 1., 1., 24, 24)?;
    let immersed = immerse_network(&background, &network, tol, |f| f.is_conductive())?;
    let mesh = refine_times(immersed, level);
    let (flow, sets, boundary, network) = assemble(id, level, mesh, network, boundary, 1.0)?;
    Ok(Benchmark {
        id,
        level,
        network,
        sets,
        boundary,
        flow,
        transport: None,
        profiles: vec![line("diagonal", 0., 0.5, 1., 0.9)],
        pressure_range: (1.0, 4.0),
    })
}

/// Top surface of the Hydrocoin domain.
fn hydrocoin_top(x: f64) -> f64 {
    let knots = [(0.0, 150.0), (400.0, 100.0), (800.0, 150.0), (1200.0, 100.0), (1600.0, 150.0)];
    for w in knots.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    150.0
}

fn hydrocoin(level: usize) -> Result<Benchmark> {
    let network = parse_fractures(HYDROCOIN)?;
    let pts = [
        (0., 150.),
        (400., 100.),
        (800., 150.),
        (1200., 100.),
        (1600., 150.),
        (1600., -1000.),
        (1500., -1000.),
        (1000., -1000.),
        (0., -1000.),
    ];
    let vertices: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
    let head = BoundaryCondition::dirichlet(LinearData { c0: 0.0, cx: 0.0, cy: 1.0 });
    let mut conditions = vec![head; 4];
    conditions.extend([BoundaryCondition::no_flow(); 5]);
    let boundary = DomainBoundary::new(vertices, conditions)?;
    let tol = default_tolerance(boundary.diameter());
    let xs: Vec<f64> = (0..=32).map(|i| 50.0 * i as f64).collect();
    let background = SimplicialMesh::mapped_columns(&xs, 16, |_| -1000.0, hydrocoin_top)?;
    let immersed = immerse_network(&background, &network, tol, |f| f.is_conductive())?;
    let mesh = refine_times(immersed, level);
    let (flow, sets, boundary, network) =
        assemble(BenchmarkId::Hydrocoin, level, mesh, network, boundary, 1e-8)?;
    Ok(Benchmark {
        id: BenchmarkId::Hydrocoin,
        level,
        network,
        sets,
        boundary,
        flow,
        transport: None,
        profiles: vec![line("y=-200", 0., -200., 1600., -200.)],
        pressure_range: (100.0, 150.0),
    })
}

fn sotra2d(level: usize) -> Result<Benchmark> {
    let path = std::env::var_os(SOTRA_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::MissingGeometryFile(PathBuf::from(format!("${SOTRA_ENV}"))))?;
    if !path.exists() {
        return Err(Error::MissingGeometryFile(path));
    }
    let network = parse_fractures(&crate::io::read_to_string(&path)?)?;
    let n = BoundaryCondition::no_flow();
    let boundary = DomainBoundary::rectangle(
        0.,
        0.,
        700.,
        600.,
        [
            n,
            BoundaryCondition::dirichlet(LinearData::constant(0.0)),
            n,
            BoundaryCondition::dirichlet(LinearData::constant(1_013_250.0)),
        ],
    )?;
    let tol = default_tolerance(boundary.diameter());
    let background = SimplicialMesh::rectangle(0., 0., 700., 600., 56, 48)?;
    let immersed = immerse_network(&background, &network, tol, |f| f.is_conductive())?;
    let mesh = refine_times(immersed, level);
    let (flow, sets, boundary, network) = assemble(BenchmarkId::Sotra2d, level, mesh, network, boundary, 1e-14)?;
    Ok(Benchmark {
        id: BenchmarkId::Sotra2d,
        level,
        network,
        sets,
        boundary,
        flow,
        transport: None,
        profiles: vec![line("y=500", 0., 500., 700., 500.), line("x=625", 625., 0., 625., 600.)],
        pressure_range: (0.0, 1_013_250.0),
    })
}

/// Builds benchmark `id` on its level-0 mesh refined `level` times.
pub fn build_benchmark(id: BenchmarkId, level: usize) -> Result<Benchmark> {
    match id {
        BenchmarkId::Hydrocoin => hydrocoin(level),
        BenchmarkId::Regular2dConductive | BenchmarkId::Regular2dBlocking | BenchmarkId::Regular2dBlockingUnfitted => {
            regular2d(id, level)
        }
        BenchmarkId::Complex2d | BenchmarkId::Complex2dHorizontal => complex2d(id, level),
        BenchmarkId::Sotra2d => sotra2d(level),
    }
}

/// Diagnostics that every reported flow solution must pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowChecks {
    pub symmetry_defect: f64,
    /// Largest `|∫_∂K u·n − ∫_K f|` over cells.
    pub mass_residual: f64,
    /// Scale of `mass_residual`, see [`flux_scale`].
    pub flux_scale: f64,
    /// Free facet pressures in the condensed system.
    pub facet_dofs: usize,
    /// Free fracture-vertex pressures in the condensed system.
    pub vertex_dofs: usize,
}

impl FlowChecks {
    pub fn relative_mass_residual(&self) -> f64 {
        if self.flux_scale > 0.0 {
            self.mass_residual / self.flux_scale
        } else {
            self.mass_residual
        }
    }
}

/// Largest cell flux magnitude built from the absolute values of the terms
/// that the recovered fluxes are computed from,
/// `Σ_i |e_i| (|A⁻¹| (|e| |p| + |e∘λ|))_i + |∫_K f|`. Roundoff in the local
/// balance is proportional to it, also where the flow itself nearly stagnates.
pub fn flux_scale(problem: &FlowProblem, solution: &FlowSolution) -> Result<f64> {
    let mesh = &problem.mesh;
    let pieces = problem.blocking_pieces();
    let mut scale = 0.0f64;
    for c in 0..mesh.num_cells() {
        let local = assemble_cell(problem, c, &pieces[c])?;
        let a_inv = local.a.try_inverse().ok_or(Error::SingularTensor { cell: c })?.abs();
        let lambda = Vector3::from_iterator(mesh.cell_facets(c).iter().map(|&f| solution.facet_pressure[f]));
        let terms = local.b.abs() * solution.cell_pressure[c].abs() + lambda.component_mul(&local.c).abs();
        let q = local.c.abs().dot(&(a_inv * terms));
        scale = scale.max(q + local.load.abs());
    }
    Ok(scale)
}

/// Solves and checks symmetry of the condensed matrix and local conservation.
pub fn solve_checked(problem: &FlowProblem, solver: FlowSolver) -> Result<(FlowSolution, FlowChecks)> {
    let system = condense(problem)?;
    let symmetry_defect = system.matrix.symmetry_defect();
    if symmetry_defect > 1e-12 {
        return Err(Error::InvalidProblem(format!("condensed matrix asymmetric by {symmetry_defect:e}")));
    }
    let (x, report) = solve_condensed(&system, solver)?;
    let solution = recover(problem, &system, &x, report);
    let mass_residual = local_mass_residual(problem, &solution).iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let checks = FlowChecks {
        symmetry_defect,
        mass_residual,
        flux_scale: flux_scale(problem, &solution)?,
        facet_dofs: system.layout.num_free_facets,
        vertex_dofs: system.layout.num_free_vertices,
    };
    let limit = match solver {
        FlowSolver::Cholesky => 1e-10,
        FlowSolver::Cg { tol, .. } => 1e-10f64.max(100.0 * tol),
    };
    if checks.relative_mass_residual() > limit {
        return Err(Error::InvalidProblem(format!(
            "local conservation violated: residual {:e} relative to flux scale {:e}",
            checks.mass_residual, checks.flux_scale
        )));
    }
    Ok((solution, checks))
}

/// A solved benchmark at one level.
#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub benchmark: Benchmark,
    pub solution: FlowSolution,
    pub checks: FlowChecks,
    pub transport: Option<(TransportState, Vec<StepRecord>)>,
}

pub fn run_benchmark(benchmark: Benchmark, solver: FlowSolver, with_transport: bool) -> Result<BenchmarkRun> {
    let (solution, checks) = solve_checked(&benchmark.flow, solver)?;
    let transport = match (&benchmark.transport, with_transport) {
        (Some(tp), true) => {
            let run = run_transport(tp, &benchmark.flow, &solution, |_| {})?;
            Some((run.state, run.history))
        }
        _ => None,
    };
    Ok(BenchmarkRun { benchmark, solution, checks, transport })
}

/// Samples `value(cell, point)` at `n` evenly spaced points from `p0` to `p1`.
/// A point on a shared edge takes the cell whose centroid is nearest to `p0`.
pub fn line_profile(
    mesh: &SimplicialMesh,
    p0: Point,
    p1: Point,
    n: usize,
    value: impl Fn(usize, &Point) -> f64,
) -> Result<Vec<ProfileSample>> {
    let locator = CellLocator::new(mesh);
    let n = n.max(2);
    let length = (p1 - p0).norm();
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let x = p0 + (p1 - p0) * t;
            let cell = locator
                .locate_all(&x, 1e-10)
                .into_iter()
                .map(|c| (c, (mesh.centroid(c) - p0).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(c, _)| c)
                .ok_or(Error::PointOutsideDomain { x: x.x, y: x.y })?;
            Ok(ProfileSample { s: t * length, point: x, value: value(cell, &x) })
        })
        .collect()
}

pub fn pressure_profile(run: &BenchmarkRun, line: &ProfileLine, n: usize) -> Result<Vec<ProfileSample>> {
    let post = &run.solution.postprocessed;
    line_profile(&run.benchmark.flow.mesh, line.start, line.end, n, |c, x| post[c].eval(x))
}

pub fn concentration_profile(run: &BenchmarkRun, line: &ProfileLine, n: usize) -> Result<Vec<ProfileSample>> {
    let (state, _) = run
        .transport
        .as_ref()
        .ok_or_else(|| Error::InvalidTransport(format!("{} has no transport run", run.benchmark.id)))?;
    line_profile(&run.benchmark.flow.mesh, line.start, line.end, n, |c, _| state.cell[c])
}

/// One row of a convergence table.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelErrors {
    pub level: usize,
    pub cells: usize,
    pub dofs: usize,
    pub velocity: f64,
    pub pressure: f64,
    pub concentration: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub id: BenchmarkId,
    pub reference: BenchmarkId,
    pub reference_level: usize,
    pub reference_cells: usize,
    pub levels: Vec<LevelErrors>,
}

fn rates_of(values: Vec<f64>) -> Vec<f64> {
    values.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

impl ConvergenceReport {
    /// `log2(e_l / e_{l+1})` between consecutive levels.
    pub fn velocity_rates(&self) -> Vec<f64> {
        rates_of(self.levels.iter().map(|l| l.velocity).collect())
    }

    pub fn pressure_rates(&self) -> Vec<f64> {
        rates_of(self.levels.iter().map(|l| l.pressure).collect())
    }

    pub fn concentration_rates(&self) -> Option<Vec<f64>> {
        let c: Option<Vec<f64>> = self.levels.iter().map(|l| l.concentration).collect();
        c.map(rates_of)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,cells,dofs,velocity_error,velocity_rate,pressure_error,pressure_rate,concentration_error,concentration_rate\n");
        let ru = self.velocity_rates();
        let rp = self.pressure_rates();
        let rc = self.concentration_rates();
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for (i, l) in self.levels.iter().enumerate() {
            let rate = |r: &[f64]| if i == 0 { None } else { r.get(i - 1).copied() };
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                l.level,
                l.cells,
                l.dofs,
                l.velocity,
                opt(rate(&ru)),
                l.pressure,
                opt(rate(&rp)),
                opt(l.concentration),
                opt(rc.as_deref().and_then(rate)),
            ));
        }
        s
    }
}

impl fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} against {} level {} ({} cells)", self.id, self.reference, self.reference_level, self.reference_cells)?;
        writeln!(f, "{:>5} {:>8} {:>8} {:>11} {:>6} {:>11} {:>6} {:>11} {:>6}", "level", "cells", "dofs", "err u", "rate", "err p*", "rate", "err c", "rate")?;
        let ru = self.velocity_rates();
        let rp = self.pressure_rates();
        let rc = self.concentration_rates();
        for (i, l) in self.levels.iter().enumerate() {
            let rate = |r: Option<&[f64]>| match (i, r) {
                (0, _) | (_, None) => "--".to_string(),
                (_, Some(r)) => format!("{:.2}", r[i - 1]),
            };
            let c = l.concentration.map_or("--".to_string(), |c| format!("{c:.3e}"));
            writeln!(
                f,
                "{:>5} {:>8} {:>8} {:>11.3e} {:>6} {:>11.3e} {:>6} {:>11} {:>6}",
                l.level,
                l.cells,
                l.dofs,
                l.velocity,
                rate(Some(&ru)),
                l.pressure,
                rate(Some(&rp)),
                c,
                rate(rc.as_deref()),
            )?;
        }
        Ok(())
    }
}

/// L2 differences of velocity, postprocessed pressure and final
/// concentration, integrated over the cells of `reference`.
pub fn l2_differences(coarse: &BenchmarkRun, reference: &BenchmarkRun) -> Result<(f64, f64, Option<f64>)> {
    let cmesh = &coarse.benchmark.flow.mesh;
    let rmesh = &reference.benchmark.flow.mesh;
    let locator = CellLocator::new(cmesh);
    let concentrations = match (&coarse.transport, &reference.transport) {
        (Some((c, _)), Some((r, _))) => Some((&c.cell, &r.cell)),
        _ => None,
    };
    let (mut eu, mut ep, mut ec) = (0.0, 0.0, 0.0);
    for r in 0..rmesh.num_cells() {
        let pts = rmesh.cell_points(r);
        let w = rmesh.area(r) / 3.0;
        for k in 0..3 {
            let x = pts[k] * (2.0 / 3.0) + pts[(k + 1) % 3].coords / 6.0 + pts[(k + 2) % 3].coords / 6.0;
            let c = locator.locate(&x, 1e-9).ok_or(Error::PointOutsideDomain { x: x.x, y: x.y })?;
            let du = reference.solution.velocity_at(rmesh, r, &x) - coarse.solution.velocity_at(cmesh, c, &x);
            eu += w * du.norm_squared();
            let dp = reference.solution.postprocessed[r].eval(&x) - coarse.solution.postprocessed[c].eval(&x);
            ep += w * dp * dp;
            if let Some((cc, rc)) = concentrations {
                ec += w * (rc[r] - cc[c]).powi(2);
            }
        }
    }
    Ok((eu.sqrt(), ep.sqrt(), concentrations.map(|_| ec.sqrt())))
}

/// Errors of levels `0..=max_level` against an already solved reference run.
pub fn convergence_against(
    id: BenchmarkId,
    max_level: usize,
    reference: &BenchmarkRun,
    solver: FlowSolver,
    with_transport: bool,
) -> Result<ConvergenceReport> {
    let mut levels = Vec::with_capacity(max_level + 1);
    for level in 0..=max_level {
        let run = run_benchmark(build_benchmark(id, level)?, solver, with_transport)?;
        let (velocity, pressure, concentration) = l2_differences(&run, reference)?;
        log::info!("{id} level {level}: |u| {velocity:e}, |p*| {pressure:e}, |c| {concentration:?}");
        levels.push(LevelErrors {
            level,
            cells: run.benchmark.flow.mesh.num_cells(),
            dofs: run.solution.num_dofs,
            velocity,
            pressure,
            concentration,
        });
    }
    Ok(ConvergenceReport {
        id,
        reference: reference.benchmark.id,
        reference_level: reference.benchmark.level,
        reference_cells: reference.benchmark.flow.mesh.num_cells(),
        levels,
    })
}

/// Solves the reference benchmark of `id` on `level`, with transport at
/// [`REFERENCE_DT`] when requested.
pub fn reference_run(id: BenchmarkId, level: usize, with_transport: bool) -> Result<BenchmarkRun> {
    let mut benchmark = build_benchmark(id.reference(), level)?;
    if let Some(tp) = benchmark.transport.as_mut() {
        tp.dt = REFERENCE_DT;
    }
    run_benchmark(benchmark, FlowSolver::Cholesky, with_transport)
}

/// Convergence study on levels `0..=max_level` against the reference
/// benchmark solved on `reference_level`.
pub fn run_convergence(id: BenchmarkId, max_level: usize, reference_level: usize) -> Result<ConvergenceReport> {
    if reference_level <= max_level {
        return Err(Error::Config(format!(
            "reference level {reference_level} must exceed the finest level {max_level}"
        )));
    }
    let with_transport = build_benchmark(id, 0)?.transport.is_some();
    let reference = reference_run(id, reference_level, with_transport)?;
    convergence_against(id, max_level, &reference, FlowSolver::Cholesky, with_transport)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in BenchmarkId::ALL {
            assert_eq!(id.as_str().parse::<BenchmarkId>().unwrap(), id);
        }
        assert!(matches!("nope".parse::<BenchmarkId>(), Err(Error::UnknownBenchmark(_))));
    }

    #[test]
    fn regular_grid_matches_fracture_lines() {
        let xs = regular2d_grid_lines();
        assert_eq!(xs.len(), 27);
        for v in [0.5, 0.625, 0.75, 1.0] {
            assert!(xs.iter().any(|x| (x - v).abs() < 1e-15));
        }
    }

    #[test]
    fn regular_fitted_counts() {
        let b = build_benchmark(BenchmarkId::Regular2dConductive, 0).unwrap();
        assert_eq!(b.flow.mesh.num_cells(), 1352);
        assert_eq!(b.flow.fracture_mesh.num_segments(), 90);
    }

    #[test]
    fn material_ratios() {
        let b = build_benchmark(BenchmarkId::Hydrocoin, 0).unwrap();
        let km = b.flow.mesh.permeability(0)[(0, 0)];
        let kc = match b.network[0].kind {
            crate::geometry::FractureKind::Conductive { tangential_conductivity } => tangential_conductivity,
            _ => unreachable!(),
        };
        assert!((kc / km - 100.0).abs() < 1e-9);
        let b = build_benchmark(BenchmarkId::Regular2dBlocking, 0).unwrap();
        assert!((b.network[0].normal_resistance().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sotra_requires_geometry() {
        if std::env::var_os(SOTRA_ENV).is_none() {
            assert!(matches!(build_benchmark(BenchmarkId::Sotra2d, 0), Err(Error::MissingGeometryFile(_))));
        }
    }

    #[test]
    fn constant_profile() {
        let mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 4, 4).unwrap();
        let rows = line_profile(&mesh, Point::new(0., 0.5), Point::new(1., 0.5), 11, |_, _| 2.0).unwrap();
        assert_eq!(rows.len(), 11);
        assert!(rows.iter().all(|r| r.value == 2.0));
        assert!((rows[10].s - 1.0).abs() < 1e-15);
        let err = line_profile(&mesh, Point::new(0., 0.5), Point::new(2., 0.5), 3, |_, _| 0.0);
        assert!(matches!(err, Err(Error::PointOutsideDomain { .. })));
    }
}
