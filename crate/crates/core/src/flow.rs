//! Hybrid-mixed RT0 discretization of the fractured Darcy problem.
//!
//! Cell velocities and pressures, and fracture velocities, are eliminated
//! locally; the global unknowns are the facet pressures `p̂` and the fracture
//! vertex pressures `p̂_c`.
//!
//! Cell velocity unknowns are the outward normal components `u_i` on the
//! three local facets, with basis `φ_i = |e_i| (x − x_i) / (2|K|)` where `x_i`
//! is the vertex opposite facet `i`. Fracture velocity unknowns are the
//! outward in-plane fluxes `g_a, g_b` at the two segment ends.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{
    cross, BcKind, BoundaryCondition, DomainBoundary, Fracture, IntersectionSets, LinearData, Point, PointClass,
    Vector,
};
use crate::linsolve::{cg_solve, CholeskyFactor, Ordering, Preconditioner, SolveReport, SparseMatrix};
use crate::mesh::{extract_fracture_mesh, FractureMesh, SimplicialMesh};

/// Penalty used for the no-flow condition at conductive-blocking crossings.
pub const DEFAULT_PENALTY: f64 = 1e6;

/// Boundary data evaluated pointwise.
pub trait BoundaryData: Send + Sync {
    /// Dirichlet pressure `p_D`.
    fn pressure(&self, p: &Point) -> f64;
    /// Outward Neumann flux `q_N = u·n`.
    fn flux(&self, p: &Point) -> f64;
}

impl BoundaryData for DomainBoundary {
    fn pressure(&self, p: &Point) -> f64 {
        nearest_condition(self, p, BcKind::Dirichlet).map_or(0.0, |c| c.data.eval(p))
    }

    fn flux(&self, p: &Point) -> f64 {
        nearest_condition(self, p, BcKind::Neumann).map_or(0.0, |c| c.data.eval(p))
    }
}

fn nearest_condition<'a>(boundary: &'a DomainBoundary, p: &Point, kind: BcKind) -> Option<&'a BoundaryCondition> {
    (0..boundary.num_edges())
        .filter(|&e| boundary.condition(e).kind == kind)
        .map(|e| {
            let (a, b) = boundary.edge(e);
            (e, crate::geometry::point_segment_distance(p, &a, &b))
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(e, _)| boundary.condition(e))
}

/// The same linear data for every Dirichlet and every Neumann facet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformBoundaryData {
    pub pressure: LinearData,
    pub flux: LinearData,
}

impl BoundaryData for UniformBoundaryData {
    fn pressure(&self, p: &Point) -> f64 {
        self.pressure.eval(p)
    }

    fn flux(&self, p: &Point) -> f64 {
        self.flux.eval(p)
    }
}

/// A piece of a blocking fracture clipped to one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockingPiece {
    pub a: Point,
    pub b: Point,
    pub normal: Vector,
    /// `ε / K_b`.
    pub resistance: f64,
}

#[derive(Clone)]
pub struct FlowProblem {
    pub mesh: SimplicialMesh,
    pub fracture_mesh: FractureMesh,
    pub blocking: Vec<Fracture>,
    /// Source `f`, constant per cell.
    pub source: Vec<f64>,
    pub boundary: Arc<dyn BoundaryData>,
    pub penalty: f64,
    pub tol: f64,
}

impl std::fmt::Debug for FlowProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowProblem")
            .field("cells", &self.mesh.num_cells())
            .field("fracture_segments", &self.fracture_mesh.num_segments())
            .field("blocking", &self.blocking.len())
            .field("penalty", &self.penalty)
            .finish()
    }
}

impl FlowProblem {
    /// Extracts the conductive fracture mesh from `mesh` and collects the
    /// blocking fractures. The source defaults to zero.
    pub fn new(
        mesh: SimplicialMesh,
        network: &[Fracture],
        sets: &IntersectionSets,
        boundary: Arc<dyn BoundaryData>,
        tol: f64,
    ) -> Result<Self> {
        let fracture_mesh = extract_fracture_mesh(&mesh, network, sets, tol)?;
        let blocking = network.iter().filter(|f| f.is_blocking()).cloned().collect();
        let source = vec![0.0; mesh.num_cells()];
        Ok(Self { mesh, fracture_mesh, blocking, source, boundary, penalty: DEFAULT_PENALTY, tol })
    }

    /// Problem on a mesh without fractures.
    pub fn unfractured(mesh: SimplicialMesh, boundary: Arc<dyn BoundaryData>, tol: f64) -> Self {
        let source = vec![0.0; mesh.num_cells()];
        Self {
            mesh,
            fracture_mesh: FractureMesh::default(),
            blocking: Vec::new(),
            source,
            boundary,
            penalty: DEFAULT_PENALTY,
            tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty > 0.0) {
            return Err(Error::InvalidProblem(format!("penalty must be positive, got {}", self.penalty)));
        }
        if self.source.len() != self.mesh.num_cells() {
            return Err(Error::InvalidProblem("source length differs from the cell count".into()));
        }
        for c in 0..self.mesh.num_cells() {
            if !is_spd(self.mesh.permeability(c)) {
                return Err(Error::SingularTensor { cell: c });
            }
        }
        if let Some(s) = self.fracture_mesh.segments.iter().find(|s| !(s.transmissivity > 0.0)) {
            return Err(Error::InvalidProblem(format!("fracture segment on facet {} has εK_c ≤ 0", s.facet)));
        }
        Ok(())
    }

    /// Blocking-fracture pieces inside each cell. A piece lying on a facet
    /// belongs to the lower-index incident cell only.
    pub fn blocking_pieces(&self) -> Vec<Vec<BlockingPiece>> {
        let mut pieces = vec![Vec::new(); self.mesh.num_cells()];
        for fracture in &self.blocking {
            let resistance = fracture.normal_resistance().expect("blocking fracture");
            let normal = fracture.normal();
            let (lo, hi) = (
                Point::new(fracture.a.x.min(fracture.b.x), fracture.a.y.min(fracture.b.y)),
                Point::new(fracture.a.x.max(fracture.b.x), fracture.a.y.max(fracture.b.y)),
            );
            for (c, cell_pieces) in pieces.iter_mut().enumerate() {
                let pts = self.mesh.cell_points(c);
                if pts.iter().all(|p| p.x < lo.x - self.tol)
                    || pts.iter().all(|p| p.x > hi.x + self.tol)
                    || pts.iter().all(|p| p.y < lo.y - self.tol)
                    || pts.iter().all(|p| p.y > hi.y + self.tol)
                {
                    continue;
                }
                let Some((a, b)) = clip_segment(&pts, &fracture.a, &fracture.b, self.tol) else {
                    continue;
                };
                if (b - a).norm() < self.tol {
                    continue;
                }
                // a piece on facet i is counted once
                let on_facet = (0..3).find(|&i| {
                    let (e0, e1) = (pts[(i + 1) % 3], pts[(i + 2) % 3]);
                    crate::geometry::point_segment_distance(&a, &e0, &e1) <= self.tol
                        && crate::geometry::point_segment_distance(&b, &e0, &e1) <= self.tol
                });
                if let Some(i) = on_facet {
                    let f = self.mesh.cell_facets(c)[i];
                    if self.mesh.facet_cells(f).0 != c {
                        continue;
                    }
                }
                cell_pieces.push(BlockingPiece { a, b, normal, resistance });
            }
        }
        pieces
    }
}

fn is_spd(k: &Matrix2<f64>) -> bool {
    let scale = k.abs().max();
    (k[(0, 1)] - k[(1, 0)]).abs() <= 1e-12 * scale && k[(0, 0)] > 0.0 && k.determinant() > 0.0
}

/// Part of segment `a`–`b` inside the closed triangle `pts` (counter-clockwise).
pub fn clip_segment(pts: &[Point; 3], a: &Point, b: &Point, tol: f64) -> Option<(Point, Point)> {
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for i in 0..3 {
        let (e0, e1) = (pts[i], pts[(i + 1) % 3]);
        let edge = e1 - e0;
        let len = edge.norm();
        // signed distance to the edge line, positive inside
        let c0 = cross(&edge, &(a - e0)) / len;
        let c1 = cross(&edge, &d) / len;
        if c1.abs() <= tol {
            // parallel to this edge over the whole segment
            if c0 < -tol {
                return None;
            }
        } else if c1 > 0.0 {
            t0 = t0.max(-c0 / c1);
        } else {
            t1 = t1.min(-c0 / c1);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some((a + d * t0, a + d * t1))
}

/// Velocity basis of a cell evaluated at `x`: column `i` is `φ_i(x)`.
fn rt0_basis(pts: &[Point; 3], area: f64, x: &Point) -> [Vector; 3] {
    let mut out = [Vector::zeros(); 3];
    for i in 0..3 {
        let len = (pts[(i + 2) % 3] - pts[(i + 1) % 3]).norm();
        out[i] = (x - pts[i]) * (len / (2.0 * area));
    }
    out
}

/// Local matrices of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCellSystem {
    /// `(K⁻¹φ_j, φ_i)` plus the blocking line integrals.
    pub a: Matrix3<f64>,
    /// `∫_K ∇·φ_i = |e_i|`.
    pub b: Vector3<f64>,
    /// Facet lengths; the trace coupling is `diag(|e_i|)`.
    pub c: Vector3<f64>,
    /// `∫_K f`.
    pub load: f64,
}

/// Assembles the local system of cell `c`.
pub fn assemble_cell(problem: &FlowProblem, c: usize, pieces: &[BlockingPiece]) -> Result<LocalCellSystem> {
    let mesh = &problem.mesh;
    let k = mesh.permeability(c);
    if !is_spd(k) {
        return Err(Error::SingularTensor { cell: c });
    }
    let kinv = k.try_inverse().ok_or(Error::SingularTensor { cell: c })?;
    let pts = mesh.cell_points(c);
    let area = mesh.area(c);
    let mut a = Matrix3::zeros();
    for q in 0..3 {
        let x = nalgebra::center(&pts[(q + 1) % 3], &pts[(q + 2) % 3]);
        let phi = rt0_basis(&pts, area, &x);
        for i in 0..3 {
            let kp = kinv * phi[i];
            for j in 0..3 {
                a[(i, j)] += area / 3.0 * kp.dot(&phi[j]);
            }
        }
    }
    let gauss = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
    for piece in pieces {
        let len = (piece.b - piece.a).norm();
        for &t in &gauss {
            let x = piece.a + (piece.b - piece.a) * t;
            let phi = rt0_basis(&pts, area, &x);
            let pn: Vec<f64> = phi.iter().map(|v| v.dot(&piece.normal)).collect();
            for i in 0..3 {
                for j in 0..3 {
                    a[(i, j)] += piece.resistance * 0.5 * len * pn[i] * pn[j];
                }
            }
        }
    }
    let lengths = Vector3::from_iterator(mesh.cell_facets(c).iter().map(|&f| mesh.facet_length(f)));
    Ok(LocalCellSystem { a, b: lengths, c: lengths, load: problem.source[c] * area })
}

/// Local matrices of one fracture segment in outward endpoint fluxes.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSegmentSystem {
    /// `⟨(εK_c)⁻¹ u_c, v_c⟩`.
    pub mass: Matrix2<f64>,
    /// Mass plus the no-flow penalty at conductive-blocking crossings.
    pub penalized: Matrix2<f64>,
}

/// Assembles the local system of fracture segment `s`.
pub fn assemble_fracture_segment(problem: &FlowProblem, s: usize) -> LocalSegmentSystem {
    let fm = &problem.fracture_mesh;
    let seg = &fm.segments[s];
    let k = seg.transmissivity;
    let l = seg.length;
    // outward fluxes at the two ends carry opposite tangential signs
    let mass = Matrix2::new(l / (3.0 * k), -l / (6.0 * k), -l / (6.0 * k), l / (3.0 * k));
    let mut penalized = mass;
    let weight = problem.penalty / k;
    for (end, &v) in seg.vertices.iter().enumerate() {
        if fm.vertices[v].class == Some(PointClass::Cb) {
            penalized[(end, end)] += weight;
        }
    }
    for ib in fm.interior_blocking.iter().filter(|ib| ib.segment == s) {
        let w = Vector2::new(-(1.0 - ib.s), ib.s);
        penalized += w * w.transpose() * weight;
    }
    LocalSegmentSystem { mass, penalized }
}

/// Facet or fracture-vertex pressure unknown.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dof {
    Free(usize),
    Fixed(f64),
}

impl Dof {
    pub fn free(&self) -> Option<usize> {
        match self {
            Dof::Free(i) => Some(*i),
            Dof::Fixed(_) => None,
        }
    }
}

/// Numbering of the skeleton unknowns. Free facet pressures come first,
/// followed by free fracture vertex pressures.
#[derive(Clone, Debug, PartialEq)]
pub struct DofLayout {
    pub facets: Vec<Dof>,
    pub vertices: Vec<Dof>,
    pub num_free_facets: usize,
    pub num_free_vertices: usize,
}

impl DofLayout {
    pub fn new(problem: &FlowProblem) -> Result<Self> {
        let mesh = &problem.mesh;
        let mut next = 0;
        let mut dirichlet = false;
        let facets: Vec<Dof> = (0..mesh.num_facets())
            .map(|f| {
                if mesh.boundary_tag(f) == Some(BcKind::Dirichlet) {
                    dirichlet = true;
                    Dof::Fixed(problem.boundary.pressure(&mesh.facet_midpoint(f)))
                } else {
                    next += 1;
                    Dof::Free(next - 1)
                }
            })
            .collect();
        let num_free_facets = next;
        let vertices: Vec<Dof> = problem
            .fracture_mesh
            .vertices
            .iter()
            .map(|v| {
                if v.class == Some(PointClass::CmDirichlet) {
                    dirichlet = true;
                    Dof::Fixed(problem.boundary.pressure(&v.point))
                } else {
                    next += 1;
                    Dof::Free(next - 1)
                }
            })
            .collect();
        if !dirichlet {
            return Err(Error::NoDirichlet);
        }
        Ok(Self { facets, vertices, num_free_facets, num_free_vertices: next - num_free_facets })
    }

    pub fn num_free(&self) -> usize {
        self.num_free_facets + self.num_free_vertices
    }

    fn value(dof: Dof, x: &[f64]) -> f64 {
        match dof {
            Dof::Free(i) => x[i],
            Dof::Fixed(v) => v,
        }
    }
}

/// Data kept per cell for back-substitution.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRecovery {
    pub a_inv: Matrix3<f64>,
    pub b: Vector3<f64>,
    /// `bᵀ A⁻¹ b`.
    pub s: f64,
    pub load: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRecovery {
    pub n_inv: Matrix2<f64>,
}

/// The condensed skeleton system and local recovery data.
#[derive(Clone, Debug)]
pub struct CondensedSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub layout: DofLayout,
    pub cells: Vec<CellRecovery>,
    pub segments: Vec<SegmentRecovery>,
}

/// Eliminates cell and fracture velocities and cell pressures.
pub fn condense(problem: &FlowProblem) -> Result<CondensedSystem> {
    problem.validate()?;
    let mesh = &problem.mesh;
    let layout = DofLayout::new(problem)?;
    let n = layout.num_free();
    let mut triplets = Vec::with_capacity(9 * mesh.num_cells() + 9 * problem.fracture_mesh.num_segments());
    let mut rhs = vec![0.0; n];
    let pieces = problem.blocking_pieces();
    let mut cells = Vec::with_capacity(mesh.num_cells());
    for c in 0..mesh.num_cells() {
        let local = assemble_cell(problem, c, &pieces[c])?;
        let a_inv = local.a.try_inverse().ok_or(Error::SingularTensor { cell: c })?;
        let d = Matrix3::from_diagonal(&local.c);
        let ab = a_inv * local.b;
        let s = local.b.dot(&ab);
        let da = d * ab;
        let sk = d * a_inv * d - da * da.transpose() / s;
        let rk = da * (local.load / s);
        let dofs = mesh.cell_facets(c).map(|f| layout.facets[f]);
        scatter(&mut triplets, &mut rhs, &dofs, sk.as_slice(), 3, rk.as_slice());
        cells.push(CellRecovery { a_inv, b: local.b, s, load: local.load });
    }
    let fm = &problem.fracture_mesh;
    let mut segments = Vec::with_capacity(fm.num_segments());
    for (i, seg) in fm.segments.iter().enumerate() {
        let local = assemble_fracture_segment(problem, i);
        let n_inv = local.penalized.try_inverse().expect("segment mass matrix is SPD");
        // z = (p̂_F, p̂_c,a, p̂_c,b), g = Ñ⁻¹ E z with E = [1 | −I]
        let e = nalgebra::Matrix2x3::new(1.0, -1.0, 0.0, 1.0, 0.0, -1.0);
        let m = e.transpose() * n_inv * e;
        let dofs = [layout.facets[seg.facet], layout.vertices[seg.vertices[0]], layout.vertices[seg.vertices[1]]];
        scatter(&mut triplets, &mut rhs, &dofs, m.as_slice(), 3, &[0.0; 3]);
        segments.push(SegmentRecovery { n_inv });
    }
    for f in 0..mesh.num_facets() {
        if mesh.boundary_tag(f) == Some(BcKind::Neumann) {
            if let Dof::Free(i) = layout.facets[f] {
                rhs[i] -= problem.boundary.flux(&mesh.facet_midpoint(f)) * mesh.facet_length(f);
            }
        }
    }
    let mut matrix = SparseMatrix::from_triplets(n, n, &triplets);
    matrix.mark_symmetric(1e-12);
    Ok(CondensedSystem { matrix, rhs, layout, cells, segments })
}

/// Adds a dense local block (column-major) over `dofs`, moving fixed values
/// to the right-hand side.
fn scatter(
    triplets: &mut Vec<(usize, usize, f64)>,
    rhs: &mut [f64],
    dofs: &[Dof],
    block: &[f64],
    dim: usize,
    load: &[f64],
) {
    for (i, di) in dofs.iter().enumerate() {
        let Dof::Free(row) = *di else { continue };
        rhs[row] += load[i];
        for (j, dj) in dofs.iter().enumerate() {
            let v = block[j * dim + i];
            match *dj {
                Dof::Free(col) => triplets.push((row, col, v)),
                Dof::Fixed(value) => rhs[row] -= v * value,
            }
        }
    }
}

/// Linear solver for the condensed system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowSolver {
    Cholesky,
    Cg { tol: f64, max_iter: usize },
}

impl Default for FlowSolver {
    fn default() -> Self {
        Self::Cholesky
    }
}

/// Linear pressure `p*(x) = value + gradient·(x − centroid)` on a cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearPressure {
    pub centroid: Point,
    pub value: f64,
    pub gradient: Vector,
}

impl LinearPressure {
    pub fn eval(&self, x: &Point) -> f64 {
        self.value + self.gradient.dot(&(x - self.centroid))
    }
}

#[derive(Clone, Debug)]
pub struct FlowSolution {
    /// Outward normal velocity on the three local facets of each cell.
    pub velocity: Vec<[f64; 3]>,
    pub cell_pressure: Vec<f64>,
    pub facet_pressure: Vec<f64>,
    /// Outward in-plane fluxes at the two ends of each fracture segment.
    pub fracture_flux: Vec<[f64; 2]>,
    pub vertex_pressure: Vec<f64>,
    pub postprocessed: Vec<LinearPressure>,
    pub report: SolveReport,
    pub num_dofs: usize,
}

impl FlowSolution {
    /// Velocity of cell `c` at `x`.
    pub fn velocity_at(&self, mesh: &SimplicialMesh, c: usize, x: &Point) -> Vector {
        let pts = mesh.cell_points(c);
        let phi = rt0_basis(&pts, mesh.area(c), x);
        (0..3).map(|i| phi[i] * self.velocity[c][i]).sum()
    }

    /// Total flux through facet `f` in the direction of its global normal.
    pub fn facet_flux(&self, mesh: &SimplicialMesh, f: usize) -> f64 {
        let c = mesh.facet_cells(f).0;
        let i = mesh.local_facet(c, f).expect("incidence");
        self.velocity[c][i] * mesh.facet_length(f)
    }
}

/// Solves the condensed system and recovers all fields.
pub fn solve(problem: &FlowProblem, solver: FlowSolver) -> Result<FlowSolution> {
    let system = condense(problem)?;
    let (x, report) = solve_condensed(&system, solver)?;
    Ok(recover(problem, &system, &x, report))
}

pub fn solve_condensed(system: &CondensedSystem, solver: FlowSolver) -> Result<(Vec<f64>, SolveReport)> {
    if system.matrix.nrows() == 0 {
        return Ok((Vec::new(), SolveReport { iterations: 0, residual: 0.0, wall_time: Default::default() }));
    }
    match solver {
        FlowSolver::Cholesky => {
            let start = Instant::now();
            let factor = CholeskyFactor::factor(&system.matrix, Ordering::NestedDissection)?;
            let x = factor.solve(&system.rhs);
            let residual = crate::linsolve::relative_residual(&system.matrix, &x, &system.rhs);
            log::debug!("cholesky: n = {}, nnz(L) = {}", factor.dim(), factor.nnz());
            Ok((x, SolveReport { iterations: 0, residual, wall_time: start.elapsed() }))
        }
        FlowSolver::Cg { tol, max_iter } => {
            cg_solve(&system.matrix, &system.rhs, tol, max_iter, Preconditioner::Jacobi)
        }
    }
}

/// Back-substitutes the skeleton solution `x` cell by cell and segment by segment.
pub fn recover(problem: &FlowProblem, system: &CondensedSystem, x: &[f64], report: SolveReport) -> FlowSolution {
    let mesh = &problem.mesh;
    let layout = &system.layout;
    let facet_pressure: Vec<f64> = layout.facets.iter().map(|&d| DofLayout::value(d, x)).collect();
    let vertex_pressure: Vec<f64> = layout.vertices.iter().map(|&d| DofLayout::value(d, x)).collect();
    let mut velocity = Vec::with_capacity(mesh.num_cells());
    let mut cell_pressure = Vec::with_capacity(mesh.num_cells());
    for (c, rec) in system.cells.iter().enumerate() {
        let lambda = Vector3::from_iterator(mesh.cell_facets(c).iter().map(|&f| facet_pressure[f]));
        let dl = lambda.component_mul(&rec.b);
        let p = (rec.load + rec.b.dot(&(rec.a_inv * dl))) / rec.s;
        let u = rec.a_inv * (rec.b * p - dl);
        velocity.push([u[0], u[1], u[2]]);
        cell_pressure.push(p);
    }
    let fracture_flux = problem
        .fracture_mesh
        .segments
        .iter()
        .zip(&system.segments)
        .map(|(seg, rec)| {
            let lf = facet_pressure[seg.facet];
            let z = Vector2::new(lf - vertex_pressure[seg.vertices[0]], lf - vertex_pressure[seg.vertices[1]]);
            let g = rec.n_inv * z;
            [g[0], g[1]]
        })
        .collect();
    let mut solution = FlowSolution {
        velocity,
        cell_pressure,
        facet_pressure,
        fracture_flux,
        vertex_pressure,
        postprocessed: Vec::new(),
        report,
        num_dofs: layout.num_free(),
    };
    solution.postprocessed = postprocess_pressure(problem, &solution);
    solution
}

/// Piecewise linear pressure with gradient `−K⁻¹ ū` and the cell mean of `p_h`.
pub fn postprocess_pressure(problem: &FlowProblem, solution: &FlowSolution) -> Vec<LinearPressure> {
    let mesh = &problem.mesh;
    (0..mesh.num_cells())
        .map(|c| {
            let centroid = mesh.centroid(c);
            let u = solution.velocity_at(mesh, c, &centroid);
            let kinv = mesh.permeability(c).try_inverse().unwrap_or_else(Matrix2::zeros);
            LinearPressure { centroid, value: solution.cell_pressure[c], gradient: -(kinv * u) }
        })
        .collect()
}

/// `∫_∂K u_h·n − ∫_K f` for every cell.
pub fn local_mass_residual(problem: &FlowProblem, solution: &FlowSolution) -> Vec<f64> {
    let mesh = &problem.mesh;
    (0..mesh.num_cells())
        .map(|c| {
            let flux: f64 = mesh.cell_facets(c).iter().zip(&solution.velocity[c]).map(|(&f, u)| mesh.facet_length(f) * u).sum();
            flux - problem.source[c] * mesh.area(c)
        })
        .collect()
}

/// Largest relative residual of each discrete equation of the scheme,
/// evaluated from freshly assembled local systems.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SchemeResiduals {
    pub darcy: f64,
    pub mass: f64,
    pub facet_balance: f64,
    pub fracture_darcy: f64,
    pub vertex_balance: f64,
}

impl SchemeResiduals {
    pub fn max(&self) -> f64 {
        [self.darcy, self.mass, self.facet_balance, self.fracture_darcy, self.vertex_balance]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn scheme_residuals(problem: &FlowProblem, solution: &FlowSolution) -> Result<SchemeResiduals> {
    let mesh = &problem.mesh;
    let fm = &problem.fracture_mesh;
    let pieces = problem.blocking_pieces();
    let mut out = SchemeResiduals::default();
    let mut facet_sum = vec![0.0; mesh.num_facets()];
    let mut facet_scale = vec![0.0f64; mesh.num_facets()];
    let mut darcy_scale = 0.0f64;
    let mut darcy = 0.0f64;
    let mut mass_scale = 0.0f64;
    let mut mass = 0.0f64;
    for c in 0..mesh.num_cells() {
        let local = assemble_cell(problem, c, &pieces[c])?;
        let u = Vector3::from(solution.velocity[c]);
        let facets = mesh.cell_facets(c);
        let lambda = Vector3::from_iterator(facets.iter().map(|&f| solution.facet_pressure[f]));
        let p = solution.cell_pressure[c];
        let au = local.a * u;
        let r = au - local.b * p + lambda.component_mul(&local.c);
        darcy = darcy.max(r.amax());
        darcy_scale = darcy_scale.max(au.amax()).max((local.b * p).amax());
        let flux = local.c.component_mul(&u);
        mass = mass.max((flux.sum() - local.load).abs());
        mass_scale = mass_scale.max(flux.amax()).max(local.load.abs());
        for i in 0..3 {
            facet_sum[facets[i]] -= flux[i];
            facet_scale[facets[i]] = facet_scale[facets[i]].max(flux[i].abs());
        }
    }
    let mut vertex_sum = vec![0.0; fm.num_vertices()];
    let mut vertex_scale = vec![0.0f64; fm.num_vertices()];
    let mut fd = 0.0f64;
    let mut fd_scale = 0.0f64;
    for (s, seg) in fm.segments.iter().enumerate() {
        let local = assemble_fracture_segment(problem, s);
        let g = Vector2::from(solution.fracture_flux[s]);
        let lf = solution.facet_pressure[seg.facet];
        let mu = Vector2::new(solution.vertex_pressure[seg.vertices[0]], solution.vertex_pressure[seg.vertices[1]]);
        let ng = local.penalized * g;
        let r = ng - Vector2::repeat(lf) + mu;
        fd = fd.max(r.amax());
        fd_scale = fd_scale.max(ng.amax()).max(lf.abs()).max(mu.amax());
        facet_sum[seg.facet] += g.sum();
        for end in 0..2 {
            vertex_sum[seg.vertices[end]] += g[end];
            vertex_scale[seg.vertices[end]] = vertex_scale[seg.vertices[end]].max(g[end].abs());
        }
    }
    let mut fb = 0.0f64;
    let mut fb_scale = 0.0f64;
    for f in 0..mesh.num_facets() {
        match mesh.boundary_tag(f) {
            Some(BcKind::Dirichlet) => continue,
            Some(BcKind::Neumann) => {
                facet_sum[f] += problem.boundary.flux(&mesh.facet_midpoint(f)) * mesh.facet_length(f)
            }
            None => {}
        }
        fb = fb.max(facet_sum[f].abs());
        fb_scale = fb_scale.max(facet_scale[f]);
    }
    let mut vb = 0.0f64;
    let mut vb_scale = 0.0f64;
    for (v, vertex) in fm.vertices.iter().enumerate() {
        if vertex.class == Some(PointClass::CmDirichlet) {
            continue;
        }
        vb = vb.max(vertex_sum[v].abs());
        vb_scale = vb_scale.max(vertex_scale[v]);
    }
    let rel = |r: f64, s: f64| if s > 0.0 { r / s } else { r };
    out.darcy = rel(darcy, darcy_scale);
    out.mass = rel(mass, mass_scale);
    out.facet_balance = rel(fb, fb_scale.max(mass_scale));
    out.fracture_darcy = rel(fd, fd_scale);
    out.vertex_balance = rel(vb, vb_scale.max(fb_scale).max(mass_scale));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{classify_intersections, BoundaryCondition};
    use crate::mesh::immerse_fracture;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn linear_dirichlet_square(n: usize) -> FlowProblem {
        let d = BoundaryCondition::dirichlet(LinearData { c0: 1.0, cx: -1.0, cy: 0.0 });
        let boundary = DomainBoundary::rectangle(0., 0., 1., 1., [d; 4]).unwrap();
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., n, n).unwrap();
        mesh.tag_boundary_from(&boundary, 1e-12).unwrap();
        FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12)
    }

    #[test]
    fn rt0_mass_matrix_against_quadrature() {
        let mesh = SimplicialMesh::new(vec![p(0., 0.), p(1., 0.), p(0., 1.)], vec![[0, 1, 2]]).unwrap();
        let boundary = UniformBoundaryData { pressure: LinearData::constant(0.0), flux: LinearData::constant(0.0) };
        let problem = FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12);
        let local = assemble_cell(&problem, 0, &[]).unwrap();
        // collapsed tensor-product Gauss rule with many points
        let pts = problem.mesh.cell_points(0);
        let (xg, wg) = gauss_legendre_01(8);
        let mut oracle = Matrix3::zeros();
        for (i, &u) in xg.iter().enumerate() {
            for (j, &v) in xg.iter().enumerate() {
                let x = p(u, (1.0 - u) * v);
                let w = wg[i] * wg[j] * (1.0 - u);
                let phi = rt0_basis(&pts, 0.5, &x);
                for a in 0..3 {
                    for b in 0..3 {
                        oracle[(a, b)] += w * phi[a].dot(&phi[b]);
                    }
                }
            }
        }
        assert!((local.a - oracle).amax() < 1e-12, "{} vs {}", local.a, oracle);
        assert_eq!(local.load, 0.0);
        assert!((local.b - Vector3::new(2f64.sqrt(), 1.0, 1.0)).amax() < 1e-15);
    }

    fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
        // Newton iteration on Legendre polynomials
        let mut x = Vec::new();
        let mut w = Vec::new();
        for i in 0..n {
            let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, t);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
                t -= p1 / dp;
            }
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
            x.push(0.5 * (1.0 - t));
            w.push(1.0 / ((1.0 - t * t) * dp * dp));
        }
        (x, w)
    }

    #[test]
    fn blocking_line_integral_against_quadrature() {
        let mesh = SimplicialMesh::new(vec![p(0., 0.), p(1., 0.), p(0., 1.)], vec![[0, 1, 2]]).unwrap();
        let boundary = UniformBoundaryData { pressure: LinearData::constant(0.0), flux: LinearData::constant(0.0) };
        let mut problem = FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12);
        problem.blocking.push(Fracture::blocking(p(0.3, -0.5), p(0.3, 1.5), 1.0, 1.0).unwrap());
        let pieces = problem.blocking_pieces();
        assert_eq!(pieces[0].len(), 1);
        assert!(((pieces[0][0].b - pieces[0][0].a).norm() - 0.7).abs() < 1e-12);
        let with = assemble_cell(&problem, 0, &pieces[0]).unwrap();
        let without = assemble_cell(&problem, 0, &[]).unwrap();
        let pts = problem.mesh.cell_points(0);
        let mut oracle = Matrix3::zeros();
        let m = 2000;
        for k in 0..m {
            let y = 0.7 * (k as f64 + 0.5) / m as f64;
            let phi = rt0_basis(&pts, 0.5, &p(0.3, y));
            for a in 0..3 {
                for b in 0..3 {
                    oracle[(a, b)] += 0.7 / m as f64 * phi[a].x * phi[b].x;
                }
            }
        }
        assert!((with.a - without.a - oracle).amax() < 1e-6);
    }

    #[test]
    fn clipping() {
        let tri = [p(0., 0.), p(1., 0.), p(0., 1.)];
        assert!(clip_segment(&tri, &p(2., 2.), &p(3., 2.), 1e-12).is_none());
        let (a, b) = clip_segment(&tri, &p(-1., 0.5), &p(2., 0.5), 1e-12).unwrap();
        assert!((a - p(0., 0.5)).norm() < 1e-11 && (b - p(0.5, 0.5)).norm() < 1e-11);
    }

    #[test]
    fn fracture_mass_matrix() {
        let boundary = DomainBoundary::rectangle(
            0.,
            0.,
            1.,
            1.,
            [BoundaryCondition::dirichlet(LinearData::constant(0.0)); 4],
        )
        .unwrap();
        let network = [Fracture::conductive(p(0.2, 0.5), p(0.8, 0.5), 0.5, 4.0).unwrap()];
        let sets = classify_intersections(&network, &boundary, 1e-12).unwrap();
        let mesh = immerse_fracture(&SimplicialMesh::rectangle(0., 0., 1., 1., 2, 2).unwrap(), 0, &network[0], 1e-12)
            .unwrap();
        let problem = FlowProblem::new(mesh, &network, &sets, Arc::new(boundary), 1e-12).unwrap();
        for s in 0..problem.fracture_mesh.num_segments() {
            let local = assemble_fracture_segment(&problem, s);
            let l = problem.fracture_mesh.segments[s].length;
            // tangential and outward endpoint coordinates differ by diag(−1, 1)
            let t = Matrix2::new(-1.0, 0.0, 0.0, 1.0);
            let tangential = t * local.mass * t;
            let expected = Matrix2::new(1. / 3., 1. / 6., 1. / 6., 1. / 3.) * (l / 2.0);
            assert!((tangential - expected).amax() < 1e-14);
            assert_eq!(local.mass, local.penalized);
        }
    }

    #[test]
    fn patch_test_is_exact() {
        for n in [1, 2, 5, 16] {
            let problem = linear_dirichlet_square(n);
            let sol = solve(&problem, FlowSolver::Cholesky).unwrap();
            for c in 0..problem.mesh.num_cells() {
                let u = sol.velocity_at(&problem.mesh, c, &problem.mesh.centroid(c));
                assert!((u - Vector::new(1.0, 0.0)).norm() < 1e-10);
                let lp = sol.postprocessed[c];
                for q in problem.mesh.cell_points(c) {
                    assert!((lp.eval(&q) - (1.0 - q.x)).abs() < 1e-10);
                }
            }
            for f in 0..problem.mesh.num_facets() {
                let m = problem.mesh.facet_midpoint(f);
                assert!((sol.facet_pressure[f] - (1.0 - m.x)).abs() < 1e-10);
            }
            assert!(scheme_residuals(&problem, &sol).unwrap().max() < 1e-10);
        }
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let d = BoundaryCondition::dirichlet(LinearData::constant(0.0));
        let boundary = DomainBoundary::rectangle(0., 0., 1., 1., [BoundaryCondition::no_flow(), d, d, d]).unwrap();
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 3, 3).unwrap();
        mesh.tag_boundary_from(&boundary, 1e-12).unwrap();
        let problem = FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12);
        let sol = solve(&problem, FlowSolver::Cholesky).unwrap();
        assert!(sol.facet_pressure.iter().chain(&sol.cell_pressure).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn no_dirichlet_is_rejected() {
        let boundary = DomainBoundary::rectangle(0., 0., 1., 1., [BoundaryCondition::no_flow(); 4]).unwrap();
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 1, 1).unwrap();
        mesh.tag_boundary_from(&boundary, 1e-12).unwrap();
        let problem = FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12);
        assert!(matches!(condense(&problem), Err(Error::NoDirichlet)));
    }

    #[test]
    fn two_cell_condensed_dimension() {
        let problem = linear_dirichlet_square(1);
        let system = condense(&problem).unwrap();
        assert_eq!(system.matrix.nrows(), 1);
        assert!(system.matrix.is_symmetric_flagged());
    }

    #[test]
    fn source_is_conserved() {
        let mut problem = linear_dirichlet_square(4);
        problem.source.iter_mut().for_each(|f| *f = 1.0);
        let sol = solve(&problem, FlowSolver::Cholesky).unwrap();
        let r = local_mass_residual(&problem, &sol);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn singular_tensor_is_rejected() {
        let mut problem = linear_dirichlet_square(1);
        problem.mesh.set_permeability(0, Matrix2::new(1.0, 0.0, 0.0, 0.0));
        assert!(matches!(condense(&problem), Err(Error::SingularTensor { cell: 0 })));
    }
}
