//! Hybridized first-order upwind finite volumes with implicit Euler for a
//! passive tracer carried by a computed flow field.
//!
//! Unknowns are ordered `[cells | facets | fracture vertices]`.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::{FlowProblem, FlowSolution};
use crate::geometry::PointClass;
use crate::linsolve::{relative_residual, LuFactor, Ordering, SolveReport, SparseMatrix};

/// Fluxes smaller than this fraction of the largest flux are treated as zero.
pub const FLUX_CUTOFF: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    /// Matrix porosity per cell.
    pub porosity: Vec<f64>,
    /// Fracture porosity per fracture segment.
    pub fracture_porosity: Vec<f64>,
    pub initial: Vec<f64>,
    /// Initial concentration on facets and fracture vertices.
    pub initial_skeleton: f64,
    /// Concentration entering through inflow boundary facets.
    pub inflow: f64,
    /// Concentration entering through inflow fracture tips.
    pub fracture_inflow: f64,
    pub dt: f64,
    pub final_time: f64,
}

impl TransportProblem {
    pub fn uniform(flow: &FlowProblem, porosity: f64, fracture_porosity: f64, dt: f64, final_time: f64) -> Self {
        Self {
            porosity: vec![porosity; flow.mesh.num_cells()],
            fracture_porosity: vec![fracture_porosity; flow.fracture_mesh.num_segments()],
            initial: vec![0.0; flow.mesh.num_cells()],
            initial_skeleton: 0.0,
            inflow: 1.0,
            fracture_inflow: 1.0,
            dt,
            final_time,
        }
    }

    pub fn validate(&self, flow: &FlowProblem) -> Result<()> {
        let in_unit = |v: &f64| *v > 0.0 && *v <= 1.0;
        if self.porosity.len() != flow.mesh.num_cells() || !self.porosity.iter().all(in_unit) {
            return Err(Error::InvalidTransport("matrix porosity must lie in (0, 1] on every cell".into()));
        }
        if self.fracture_porosity.len() != flow.fracture_mesh.num_segments()
            || !self.fracture_porosity.iter().all(in_unit)
        {
            return Err(Error::InvalidTransport("fracture porosity must lie in (0, 1] on every segment".into()));
        }
        if self.initial.len() != flow.mesh.num_cells() {
            return Err(Error::InvalidTransport("initial data length differs from the cell count".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidTransport(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.final_time >= self.dt) {
            return Err(Error::InvalidTransport("final time must be at least one time step".into()));
        }
        Ok(())
    }

    /// Number of implicit Euler steps needed to reach the final time.
    pub fn num_steps(&self) -> usize {
        let n = self.final_time / self.dt;
        let r = n.round();
        if (n - r).abs() <= 1e-9 * n.max(1.0) {
            r as usize
        } else {
            n.ceil() as usize
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportState {
    pub cell: Vec<f64>,
    pub facet: Vec<f64>,
    pub vertex: Vec<f64>,
    pub time: f64,
}

impl TransportState {
    pub fn initial(problem: &TransportProblem, flow: &FlowProblem) -> Self {
        Self {
            cell: problem.initial.clone(),
            facet: vec![problem.initial_skeleton; flow.mesh.num_facets()],
            vertex: vec![problem.initial_skeleton; flow.fracture_mesh.num_vertices()],
            time: 0.0,
        }
    }

    pub fn min(&self) -> f64 {
        self.cell.iter().chain(&self.facet).chain(&self.vertex).copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.cell.iter().chain(&self.facet).chain(&self.vertex).copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Which value a cell side or fracture end transports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trace {
    /// The cell value on a cell side, the facet value on a fracture end.
    Upstream,
    /// The facet value on a cell side, the vertex value on a fracture end.
    Skeleton,
}

/// Upwind choice per cell side and per fracture segment end.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSelector {
    /// Outward fluxes `∫ u·n` of the local cell facets after cutoff.
    pub cell_flux: Vec<[f64; 3]>,
    /// Outward in-plane fluxes at segment ends after cutoff.
    pub segment_flux: Vec<[f64; 2]>,
    pub cell: Vec<[Trace; 3]>,
    pub segment: Vec<[Trace; 2]>,
}

pub fn select(flux: f64) -> Trace {
    if flux > 0.0 {
        Trace::Upstream
    } else {
        Trace::Skeleton
    }
}

pub fn upwind_trace_selector(flow: &FlowProblem, solution: &FlowSolution) -> TraceSelector {
    let mesh = &flow.mesh;
    let mut cell_flux: Vec<[f64; 3]> = (0..mesh.num_cells())
        .map(|c| {
            let facets = mesh.cell_facets(c);
            [0, 1, 2].map(|i| solution.velocity[c][i] * mesh.facet_length(facets[i]))
        })
        .collect();
    let mut segment_flux = solution.fracture_flux.clone();
    // Skeleton rows without storage turn any flux mismatch into an
    // overshoot of the upwind trace, so the fluxes there are made
    // single-valued first.
    let mut on_segment = vec![false; mesh.num_facets()];
    for seg in &flow.fracture_mesh.segments {
        on_segment[seg.facet] = true;
    }
    for f in 0..mesh.num_facets() {
        if let (c0, Some(c1)) = mesh.facet_cells(f) {
            if on_segment[f] {
                continue;
            }
            let i0 = mesh.local_facet(c0, f).unwrap();
            let i1 = mesh.local_facet(c1, f).unwrap();
            let mean = 0.5 * (cell_flux[c0][i0] - cell_flux[c1][i1]);
            cell_flux[c0][i0] = mean;
            cell_flux[c1][i1] = -mean;
        }
    }
    let fm = &flow.fracture_mesh;
    let mut ends_of_vertex: Vec<Vec<(usize, usize)>> = vec![Vec::new(); fm.num_vertices()];
    for (s, seg) in fm.segments.iter().enumerate() {
        for end in 0..2 {
            ends_of_vertex[seg.vertices[end]].push((s, end));
        }
    }
    for (v, ends) in ends_of_vertex.iter().enumerate() {
        if matches!(fm.vertices[v].class, Some(PointClass::CmDirichlet | PointClass::CmNeumann)) {
            continue;
        }
        let mismatch = ends.iter().map(|&(s, e)| segment_flux[s][e]).sum::<f64>() / ends.len() as f64;
        for &(s, e) in ends {
            segment_flux[s][e] -= mismatch;
        }
    }
    let scale = cell_flux
        .iter()
        .flatten()
        .chain(segment_flux.iter().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = FLUX_CUTOFF * scale;
    for v in cell_flux.iter_mut().flatten().chain(segment_flux.iter_mut().flatten()) {
        if v.abs() < cutoff {
            *v = 0.0;
        }
    }
    // both sides of a facet must agree on the flux magnitude
    for f in 0..mesh.num_facets() {
        if let (c0, Some(c1)) = mesh.facet_cells(f) {
            let i0 = mesh.local_facet(c0, f).unwrap();
            let i1 = mesh.local_facet(c1, f).unwrap();
            if cell_flux[c0][i0] == 0.0 || cell_flux[c1][i1] == 0.0 {
                cell_flux[c0][i0] = 0.0;
                cell_flux[c1][i1] = 0.0;
            }
        }
    }
    let cell = cell_flux.iter().map(|fl| fl.map(select)).collect();
    let segment = segment_flux.iter().map(|fl| fl.map(select)).collect();
    TraceSelector { cell_flux, segment_flux, cell, segment }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Row {
    Balance,
    /// Fixed to the inflow value.
    Inflow,
    /// Fixed to the average of neighbouring values.
    Average,
}

/// Implicit Euler operator for a fixed flow field and time step.
pub struct TransportOperator {
    pub matrix: SparseMatrix,
    factor: LuFactor,
    nc: usize,
    nf: usize,
    cell_storage: Vec<f64>,
    facet_storage: Vec<f64>,
    facet_rows: Vec<Row>,
    vertex_rows: Vec<Row>,
    inflow: f64,
    fracture_inflow: f64,
    /// `(facet, cell, outward flux)` for every boundary facet.
    boundary_facets: Vec<(usize, usize, f64)>,
    /// `(vertex, facet, outward flux)` for every segment end at a boundary vertex.
    boundary_ends: Vec<(usize, usize, f64)>,
    cell_source: Vec<f64>,
}

impl TransportOperator {
    pub fn new(problem: &TransportProblem, flow: &FlowProblem, solution: &FlowSolution) -> Result<Self> {
        problem.validate(flow)?;
        let mesh = &flow.mesh;
        let fm = &flow.fracture_mesh;
        let nc = mesh.num_cells();
        let nf = mesh.num_facets();
        let nv = fm.num_vertices();
        let sel = upwind_trace_selector(flow, solution);
        let dt = problem.dt;
        let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(4 * nc + 6 * nf);

        let cell_storage: Vec<f64> = (0..nc).map(|c| problem.porosity[c] * mesh.area(c) / dt).collect();
        let cell_source: Vec<f64> = (0..nc).map(|c| flow.source[c] * mesh.area(c)).collect();
        // Balance rows take `storage + inflow` on the diagonal in place of
        // `storage + outflow - source`. The two agree for a conservative
        // flux field; the first keeps every row a convex combination even
        // when conservation only holds to roundoff.
        for c in 0..nc {
            let mut diag = cell_storage[c];
            for (i, &f) in mesh.cell_facets(c).iter().enumerate() {
                let flux = sel.cell_flux[c][i];
                if sel.cell[c][i] == Trace::Skeleton {
                    diag -= flux;
                    t.push((c, nc + f, flux));
                }
            }
            t.push((c, c, diag));
        }

        let mut facet_storage = vec![0.0; nf];
        let mut segment_of_facet = vec![None; nf];
        for (s, seg) in fm.segments.iter().enumerate() {
            facet_storage[seg.facet] = seg.thickness * problem.fracture_porosity[s] * seg.length / dt;
            segment_of_facet[seg.facet] = Some(s);
        }

        let mut facet_rows = vec![Row::Balance; nf];
        let mut boundary_facets = Vec::new();
        for f in 0..nf {
            let row = nc + f;
            let (c0, c1) = mesh.facet_cells(f);
            let sides: Vec<(usize, usize)> =
                std::iter::once(c0).chain(c1).map(|c| (c, mesh.local_facet(c, f).unwrap())).collect();
            if mesh.boundary_tag(f).is_some() && segment_of_facet[f].is_none() {
                let (c, i) = sides[0];
                let flux = sel.cell_flux[c][i];
                boundary_facets.push((f, c, flux));
                if flux < 0.0 {
                    facet_rows[f] = Row::Inflow;
                    t.push((row, row, 1.0));
                } else {
                    // outflow and no-flow boundaries carry the cell value
                    facet_rows[f] = Row::Average;
                    t.push((row, row, 1.0));
                    t.push((row, c, -1.0));
                }
                continue;
            }
            let mut entries: Vec<(usize, f64)> = Vec::new();
            let mut diag = facet_storage[f];
            for &(c, i) in &sides {
                let flux = sel.cell_flux[c][i];
                if sel.cell[c][i] == Trace::Upstream {
                    entries.push((c, -flux));
                    diag += flux;
                }
            }
            if let Some(s) = segment_of_facet[f] {
                for end in 0..2 {
                    let g = sel.segment_flux[s][end];
                    if sel.segment[s][end] == Trace::Skeleton {
                        entries.push((nc + nf + fm.segments[s].vertices[end], g));
                        diag -= g;
                    }
                }
            }
            if diag > 0.0 {
                t.push((row, row, diag));
                t.extend(entries.into_iter().map(|(col, v)| (row, col, v)));
            } else {
                facet_rows[f] = Row::Average;
                t.push((row, row, 1.0));
                for &(c, _) in &sides {
                    t.push((row, c, -1.0 / sides.len() as f64));
                }
            }
        }

        let mut ends_of_vertex: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nv];
        for (s, seg) in fm.segments.iter().enumerate() {
            for end in 0..2 {
                ends_of_vertex[seg.vertices[end]].push((s, end));
            }
        }
        let mut vertex_rows = vec![Row::Balance; nv];
        let mut boundary_ends = Vec::new();
        for v in 0..nv {
            let row = nc + nf + v;
            let ends = &ends_of_vertex[v];
            let on_boundary = matches!(fm.vertices[v].class, Some(PointClass::CmDirichlet | PointClass::CmNeumann));
            let mut inflow = 0.0;
            let mut outflow = 0.0;
            let mut entries = Vec::new();
            for &(s, end) in ends {
                let g = sel.segment_flux[s][end];
                if on_boundary {
                    boundary_ends.push((v, fm.segments[s].facet, g));
                }
                match sel.segment[s][end] {
                    Trace::Upstream => {
                        entries.push((nc + fm.segments[s].facet, -g));
                        inflow += g;
                    }
                    Trace::Skeleton => outflow -= g,
                }
            }
            if on_boundary {
                if outflow > 0.0 {
                    vertex_rows[v] = Row::Inflow;
                    t.push((row, row, 1.0));
                } else {
                    // outflowing tip: flux-weighted upstream facet values
                    vertex_rows[v] = Row::Average;
                    let total: f64 = entries.iter().map(|e| -e.1).sum();
                    t.push((row, row, 1.0));
                    if total > 0.0 {
                        t.extend(entries.iter().map(|&(col, w)| (row, col, w / total)));
                    } else {
                        for &(s, _) in ends {
                            t.push((row, nc + fm.segments[s].facet, -1.0 / ends.len() as f64));
                        }
                    }
                }
                continue;
            }
            if inflow > 0.0 {
                t.push((row, row, inflow));
                t.extend(entries.into_iter().map(|(col, w)| (row, col, w)));
            } else {
                vertex_rows[v] = Row::Average;
                t.push((row, row, 1.0));
                for &(s, _) in ends {
                    t.push((row, nc + fm.segments[s].facet, -1.0 / ends.len() as f64));
                }
            }
        }
        let n = nc + nf + nv;
        let matrix = SparseMatrix::from_triplets(n, n, &t);
        let factor = LuFactor::factor(&matrix, Ordering::NestedDissection, 0.1).map_err(|e| match e {
            Error::Singular { column } => Error::SingularTransportSystem(format!("no pivot for unknown {column}")),
            other => other,
        })?;
        Ok(Self {
            matrix,
            factor,
            nc,
            nf,
            cell_storage,
            facet_storage,
            facet_rows,
            vertex_rows,
            inflow: problem.inflow,
            fracture_inflow: problem.fracture_inflow,
            boundary_facets,
            boundary_ends,
            cell_source,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn rhs(&self, state: &TransportState) -> Vec<f64> {
        let mut b = vec![0.0; self.dim()];
        for c in 0..self.nc {
            b[c] = self.cell_storage[c] * state.cell[c];
        }
        for f in 0..self.nf {
            b[self.nc + f] = match self.facet_rows[f] {
                Row::Balance => self.facet_storage[f] * state.facet[f],
                Row::Inflow => self.inflow,
                Row::Average => 0.0,
            };
        }
        for (v, row) in self.vertex_rows.iter().enumerate() {
            b[self.nc + self.nf + v] = match row {
                Row::Inflow => self.fracture_inflow,
                _ => 0.0,
            };
        }
        b
    }

    /// One implicit Euler step.
    pub fn step(&self, state: &TransportState, dt: f64) -> (TransportState, SolveReport) {
        let start = Instant::now();
        let b = self.rhs(state);
        let x = self.factor.solve(&b);
        let residual = relative_residual(&self.matrix, &x, &b);
        let next = TransportState {
            cell: x[..self.nc].to_vec(),
            facet: x[self.nc..self.nc + self.nf].to_vec(),
            vertex: x[self.nc + self.nf..].to_vec(),
            time: state.time + dt,
        };
        (next, SolveReport { iterations: 0, residual, wall_time: start.elapsed() })
    }

    /// `Σ φ|K| c + Σ εφ_c|F| ĉ` (times `1/Δt`, undone here).
    pub fn total_mass(&self, state: &TransportState, dt: f64) -> f64 {
        let cells: f64 = self.cell_storage.iter().zip(&state.cell).map(|(s, c)| s * c).sum();
        let facets: f64 = self.facet_storage.iter().zip(&state.facet).map(|(s, c)| s * c).sum();
        (cells + facets) * dt
    }

    /// Storage change over one step and the net boundary and source
    /// contributions it must equal.
    pub fn mass_balance(&self, old: &TransportState, new: &TransportState, dt: f64) -> MassBalance {
        let storage_change = self.total_mass(new, dt) - self.total_mass(old, dt);
        let mut influx = 0.0;
        let mut outflux = 0.0;
        for &(f, c, flux) in &self.boundary_facets {
            if flux < 0.0 {
                influx -= flux * new.facet[f];
            } else {
                outflux += flux * new.cell[c];
            }
        }
        for &(v, f, g) in &self.boundary_ends {
            if g > 0.0 {
                outflux += g * new.facet[f];
            } else {
                influx -= g * new.vertex[v];
            }
        }
        let source: f64 = self.cell_source.iter().zip(&new.cell).map(|(s, c)| s * c).sum();
        let expected = dt * (influx - outflux + source);
        let scale = self.total_mass(new, dt).abs().max(self.total_mass(old, dt).abs()).max(dt * (influx + outflux));
        MassBalance {
            storage_change,
            expected,
            relative_defect: if scale > 0.0 { (storage_change - expected).abs() / scale } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassBalance {
    pub storage_change: f64,
    pub expected: f64,
    pub relative_defect: f64,
}

/// Assembles and solves a single step from `state`.
pub fn transport_step(
    state: &TransportState,
    problem: &TransportProblem,
    flow: &FlowProblem,
    solution: &FlowSolution,
) -> Result<TransportState> {
    let op = TransportOperator::new(problem, flow, solution)?;
    Ok(op.step(state, problem.dt).0)
}

/// Per-step diagnostics of a transport run.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub total_mass: f64,
    pub mass_defect: f64,
    pub min: f64,
    pub max: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct TransportRun {
    pub state: TransportState,
    pub history: Vec<StepRecord>,
}

/// Steps until the final time, calling `observer` after every step.
pub fn run_transport(
    problem: &TransportProblem,
    flow: &FlowProblem,
    solution: &FlowSolution,
    mut observer: impl FnMut(&TransportState),
) -> Result<TransportRun> {
    let op = TransportOperator::new(problem, flow, solution)?;
    let mut state = TransportState::initial(problem, flow);
    let mut history = Vec::with_capacity(problem.num_steps());
    for _ in 0..problem.num_steps() {
        let (next, report) = op.step(&state, problem.dt);
        let balance = op.mass_balance(&state, &next, problem.dt);
        history.push(StepRecord {
            time: next.time,
            total_mass: op.total_mass(&next, problem.dt),
            mass_defect: balance.relative_defect,
            min: next.min(),
            max: next.max(),
            residual: report.residual,
        });
        observer(&next);
        state = next;
    }
    Ok(TransportRun { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{solve, FlowSolver, UniformBoundaryData};
    use crate::geometry::{BoundaryCondition, DomainBoundary, LinearData};
    use crate::mesh::SimplicialMesh;
    use std::sync::Arc;

    fn channel(nx: usize) -> (FlowProblem, FlowSolution) {
        let n = BoundaryCondition::no_flow();
        let inflow = BoundaryCondition::neumann(LinearData::constant(-1.0));
        let outflow = BoundaryCondition::dirichlet(LinearData::constant(0.0));
        let boundary = DomainBoundary::rectangle(0., 0., 1., 0.1, [n, outflow, n, inflow]).unwrap();
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 0.1, nx, 1).unwrap();
        mesh.tag_boundary_from(&boundary, 1e-12).unwrap();
        let problem = FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12);
        let sol = solve(&problem, FlowSolver::Cholesky).unwrap();
        (problem, sol)
    }

    #[test]
    fn selector_follows_flux_sign() {
        assert_eq!(select(1.0), Trace::Upstream);
        assert_eq!(select(0.0), Trace::Skeleton);
        assert_eq!(select(-2.0), Trace::Skeleton);
    }

    #[test]
    fn no_flow_keeps_state() {
        let boundary = UniformBoundaryData { pressure: LinearData::constant(1.0), flux: LinearData::constant(0.0) };
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 3, 3).unwrap();
        let d = BoundaryCondition::dirichlet(LinearData::constant(1.0));
        mesh.tag_boundary_from(&DomainBoundary::rectangle(0., 0., 1., 1., [d; 4]).unwrap(), 1e-12).unwrap();
        let flow = FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12);
        let sol = solve(&flow, FlowSolver::Cholesky).unwrap();
        let mut tp = TransportProblem::uniform(&flow, 0.3, 1.0, 0.1, 0.3);
        tp.initial = (0..flow.mesh.num_cells()).map(|c| c as f64 / 18.0).collect();
        let run = run_transport(&tp, &flow, &sol, |_| {}).unwrap();
        assert_eq!(run.history.len(), 3);
        for (a, b) in run.state.cell.iter().zip(&tp.initial) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_is_monotone_and_conservative() {
        let (flow, sol) = channel(20);
        let tp = TransportProblem::uniform(&flow, 0.2, 1.0, 0.01, 0.2);
        let run = run_transport(&tp, &flow, &sol, |_| {}).unwrap();
        for rec in &run.history {
            assert!(rec.min >= -1e-12 && rec.max <= 1.0 + 1e-12);
            assert!(rec.mass_defect < 1e-12, "{rec:?}");
        }
        let c = &run.state.cell;
        // upstream cells carry more tracer
        assert!(c[0] > c[c.len() - 1]);
    }

    #[test]
    fn steps_count() {
        let (flow, _) = channel(2);
        let tp = TransportProblem::uniform(&flow, 0.2, 1.0, 0.1, 0.3);
        assert_eq!(tp.num_steps(), 3);
    }

    #[test]
    fn invalid_porosity() {
        let (flow, sol) = channel(2);
        let mut tp = TransportProblem::uniform(&flow, 0.2, 1.0, 0.1, 0.3);
        tp.porosity[0] = 0.0;
        assert!(matches!(TransportOperator::new(&tp, &flow, &sol), Err(Error::InvalidTransport(_))));
    }
}
