#![allow(dead_code)]

use std::sync::Arc;

use frax::flow::{FlowProblem, UniformBoundaryData};
use frax::geometry::{
    classify_intersections, default_tolerance, BoundaryCondition, DomainBoundary, Fracture, LinearData, Point,
};
use frax::mesh::{immerse_fracture, SimplicialMesh, Tensor};
use rand::Rng;

pub fn p(x: f64, y: f64) -> Point {
    Point::new(x, y)
}

pub fn linear_pressure() -> LinearData {
    LinearData { c0: 1.0, cx: -1.0, cy: 0.0 }
}

/// Unit square with `p = 1 − x` imposed on the whole boundary.
pub fn patch_problem(mesh: SimplicialMesh) -> FlowProblem {
    let d = BoundaryCondition::dirichlet(linear_pressure());
    let boundary = DomainBoundary::rectangle(0., 0., 1., 1., [d; 4]).unwrap();
    let mut mesh = mesh;
    mesh.tag_boundary_from(&boundary, 1e-12).unwrap();
    FlowProblem::unfractured(mesh, Arc::new(boundary), 1e-12)
}

/// Left `p = left`, right `p = right`, no flow on top and bottom.
pub fn left_right_boundary(left: f64, right: f64) -> DomainBoundary {
    let n = BoundaryCondition::no_flow();
    DomainBoundary::rectangle(
        0.,
        0.,
        1.,
        1.,
        [
            n,
            BoundaryCondition::dirichlet(LinearData::constant(right)),
            n,
            BoundaryCondition::dirichlet(LinearData::constant(left)),
        ],
    )
    .unwrap()
}

/// Tags `mesh` and assembles a problem for `network` inside `boundary`.
pub fn fractured_problem(mut mesh: SimplicialMesh, network: &[Fracture], boundary: DomainBoundary) -> FlowProblem {
    let tol = default_tolerance(boundary.diameter());
    mesh.tag_boundary_from(&boundary, tol).unwrap();
    for (i, f) in network.iter().enumerate().filter(|(_, f)| f.is_conductive()) {
        mesh.tag_fracture_facets(i, f, tol);
    }
    let sets = classify_intersections(network, &boundary, tol).unwrap();
    FlowProblem::new(mesh, network, &sets, Arc::new(boundary), tol).unwrap()
}

/// Same mesh, fractures and boundary kinds with all data set to zero.
pub fn zero_data(problem: &FlowProblem) -> FlowProblem {
    let mut zero = problem.clone();
    zero.boundary = Arc::new(UniformBoundaryData { pressure: LinearData::default(), flux: LinearData::default() });
    zero.source.iter_mut().for_each(|s| *s = 0.0);
    zero
}

pub fn random_spd(rng: &mut impl Rng) -> Tensor {
    let (a, b, t) = (rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0), rng.gen_range(0.0..std::f64::consts::PI));
    let (c, s) = (t.cos(), t.sin());
    let r = Tensor::new(c, -s, s, c);
    r * Tensor::new(a, 0.0, 0.0, b) * r.transpose()
}

pub fn random_mesh(rng: &mut impl Rng) -> SimplicialMesh {
    let (nx, ny) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
    let grid = SimplicialMesh::rectangle(0., 0., 1., 1., nx, ny).unwrap();
    let amplitude = rng.gen_range(0.0..0.3);
    let (hx, hy) = (1.0 / nx as f64, 1.0 / ny as f64);
    let vertices = grid
        .vertices()
        .iter()
        .map(|v| {
            let interior = |t: f64, h: f64| t > 0.5 * h && t < 1.0 - 0.5 * h;
            let dx = if interior(v.x, hx) { rng.gen_range(-amplitude..=amplitude) * hx } else { 0.0 };
            let dy = if interior(v.y, hy) { rng.gen_range(-amplitude..=amplitude) * hy } else { 0.0 };
            p(v.x + dx, v.y + dy)
        })
        .collect();
    SimplicialMesh::new(vertices, grid.cells().to_vec()).unwrap()
}

/// Segment strictly inside the unit square with length at least 0.1.
pub fn random_segment(rng: &mut impl Rng) -> (Point, Point) {
    loop {
        let a = p(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
        let b = p(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
        if (b - a).norm() >= 0.1 {
            return (a, b);
        }
    }
}

/// Small random problem: jittered mesh, random anisotropic permeability,
/// one immersed conductive fracture, one unfitted blocking fracture and
/// random Dirichlet/Neumann data.
pub fn random_problem(rng: &mut impl Rng) -> FlowProblem {
    let tol = default_tolerance(2f64.sqrt());
    let mut mesh = random_mesh(rng);
    let (a, b) = random_segment(rng);
    let conductive = Fracture::conductive(a, b, 1e-3, rng.gen_range(1.0..1e4)).unwrap();
    mesh = immerse_fracture(&mesh, 0, &conductive, tol).unwrap();
    for c in 0..mesh.num_cells() {
        let k = random_spd(rng);
        mesh.set_permeability(c, k);
    }
    let (a, b) = loop {
        let s = random_segment(rng);
        // keep the blocking fracture off the conductive one
        if frax::geometry::segment_intersection((s.0, s.1), (conductive.a, conductive.b), tol).unwrap().is_none() {
            break s;
        }
    };
    let blocking = Fracture::blocking(a, b, 1e-3, rng.gen_range(1e-4..1.0)).unwrap();
    let lin = |rng: &mut dyn rand::RngCore| LinearData {
        c0: rng.gen_range(-1.0..1.0),
        cx: rng.gen_range(-1.0..1.0),
        cy: rng.gen_range(-1.0..1.0),
    };
    let d = BoundaryCondition::dirichlet(lin(rng));
    let mut conditions = [d; 4];
    for c in conditions.iter_mut().skip(1) {
        if rng.gen_bool(0.5) {
            *c = BoundaryCondition::neumann(lin(rng));
        }
    }
    let boundary = DomainBoundary::rectangle(0., 0., 1., 1., conditions).unwrap();
    let mut problem = fractured_problem(mesh, &[conductive, blocking], boundary);
    for s in problem.source.iter_mut() {
        *s = rng.gen_range(-1.0..1.0);
    }
    problem
}
