mod common;

use common::{left_right_boundary, patch_problem, random_spd};
use frax::bench::{build_benchmark, jittered_unit_square, solve_checked, BenchmarkId};
use frax::flow::{FlowProblem, FlowSolution, FlowSolver};
use frax::transport::{run_transport, TransportProblem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn heterogeneous_flow(seed: u64) -> (FlowProblem, FlowSolution) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mesh = jittered_unit_square(7, 0.3, seed).unwrap();
    for c in 0..mesh.num_cells() {
        let k = random_spd(&mut rng);
        mesh.set_permeability(c, k);
    }
    let problem = common::fractured_problem(mesh, &[], left_right_boundary(1.0, 0.0));
    let (sol, _) = solve_checked(&problem, FlowSolver::Cholesky).unwrap();
    (problem, sol)
}

/// Cell-centred implicit upwind finite volumes on the same fluxes.
fn plain_upwind(flow: &FlowProblem, sol: &FlowSolution, tp: &TransportProblem, steps: usize) -> Vec<Vec<f64>> {
    let m = &flow.mesh;
    let n = m.num_cells();
    let mut a = DMatrix::zeros(n, n);
    let mut inflow = DVector::zeros(n);
    for c in 0..n {
        a[(c, c)] += tp.porosity[c] * m.area(c) / tp.dt;
        for (i, &f) in m.cell_facets(c).iter().enumerate() {
            let q = sol.velocity[c][i] * m.facet_length(f);
            if q > 0.0 {
                a[(c, c)] += q;
            } else {
                match m.facet_cells(f) {
                    (k, Some(l)) => a[(c, if k == c { l } else { k })] += q,
                    (_, None) => inflow[c] -= q * tp.inflow,
                }
            }
        }
    }
    let lu = a.lu();
    let mut c = DVector::from_vec(tp.initial.clone());
    let mut out = Vec::new();
    for _ in 0..steps {
        let rhs = c.component_mul(&DVector::from_iterator(
            n,
            (0..n).map(|k| tp.porosity[k] * m.area(k) / tp.dt),
        )) + &inflow;
        c = lu.solve(&rhs).unwrap();
        out.push(c.as_slice().to_vec());
    }
    out
}

#[test]
fn matches_plain_finite_volumes_without_fractures() {
    for seed in [1, 2, 3] {
        let (flow, sol) = heterogeneous_flow(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut tp = TransportProblem::uniform(&flow, 0.3, 0.9, 0.02, 0.2);
        tp.porosity.iter_mut().for_each(|p| *p = rng.gen_range(0.05..1.0));
        let mut states = Vec::new();
        run_transport(&tp, &flow, &sol, |s| states.push(s.cell.clone())).unwrap();
        let oracle = plain_upwind(&flow, &sol, &tp, tp.num_steps());
        assert_eq!(states.len(), oracle.len());
        for (got, want) in states.iter().zip(&oracle) {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-11, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn constant_state_is_preserved() {
    let b = build_benchmark(BenchmarkId::Regular2dConductive, 0).unwrap();
    let (sol, _) = solve_checked(&b.flow, FlowSolver::Cholesky).unwrap();
    let mut tp = b.transport.unwrap();
    tp.initial.iter_mut().for_each(|c| *c = 1.0);
    tp.initial_skeleton = 1.0;
    let run = run_transport(&tp, &b.flow, &sol, |_| {}).unwrap();
    let s = &run.state;
    for v in s.cell.iter().chain(&s.facet).chain(&s.vertex) {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
}

#[test]
fn clean_water_stays_clean() {
    let b = build_benchmark(BenchmarkId::Complex2d, 0).unwrap();
    let (sol, _) = solve_checked(&b.flow, FlowSolver::Cholesky).unwrap();
    let mut tp = TransportProblem::uniform(&b.flow, 0.2, 0.9, 0.01, 0.05);
    tp.inflow = 0.0;
    tp.fracture_inflow = 0.0;
    let run = run_transport(&tp, &b.flow, &sol, |_| {}).unwrap();
    assert!(run.state.cell.iter().all(|&c| c == 0.0));
}

#[test]
fn concentration_grows_monotonically_in_time() {
    for id in [BenchmarkId::Regular2dConductive, BenchmarkId::Regular2dBlocking] {
        let b = build_benchmark(id, 0).unwrap();
        let (sol, _) = solve_checked(&b.flow, FlowSolver::Cholesky).unwrap();
        let tp = b.transport.unwrap();
        let mut previous = tp.initial.clone();
        run_transport(&tp, &b.flow, &sol, |s| {
            for (new, old) in s.cell.iter().zip(&previous) {
                assert!(*new >= old - 1e-13, "{id}: {new} < {old}");
            }
            previous = s.cell.clone();
        })
        .unwrap();
    }
}

#[test]
fn long_times_reach_the_inflow_concentration() {
    let mesh = jittered_unit_square(6, 0.25, 5).unwrap();
    let flow = patch_problem(mesh);
    let (sol, _) = solve_checked(&flow, FlowSolver::Cholesky).unwrap();
    let tp = TransportProblem::uniform(&flow, 0.5, 0.9, 5.0, 200.0);
    let run = run_transport(&tp, &flow, &sol, |_| {}).unwrap();
    assert!(run.state.cell.iter().all(|&c| (c - 1.0).abs() < 1e-9), "{:?}", run.state.min());
}

#[test]
fn mass_balance_holds_per_step_on_every_benchmark() {
    for id in [BenchmarkId::Hydrocoin, BenchmarkId::Complex2d, BenchmarkId::Complex2dHorizontal] {
        let b = build_benchmark(id, 0).unwrap();
        let (sol, _) = solve_checked(&b.flow, FlowSolver::Cholesky).unwrap();
        // pick Δt so the tracer moves a visible distance in 10 steps
        let velocity = sol.velocity.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let dt = 0.02 * b.boundary.diameter() * 0.1 / velocity;
        let tp = TransportProblem::uniform(&b.flow, 0.1, 0.9, dt, 10.0 * dt);
        let run = run_transport(&tp, &b.flow, &sol, |_| {}).unwrap();
        for r in &run.history {
            assert!(r.mass_defect < 1e-9, "{id}: {r:?}");
            assert!(r.min > -1e-10 && r.max < 1.0 + 1e-10, "{id}: {r:?}");
        }
        assert!(run.history.last().unwrap().total_mass > 0.0);
    }
}
