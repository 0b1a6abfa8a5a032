mod common;

use std::collections::HashSet;

use common::{fractured_problem, p, random_mesh, random_segment};
use frax::bench::solve_checked;
use frax::flow::FlowSolver;
use frax::geometry::{
    classify_intersections, default_tolerance, segment_intersection, BoundaryCondition, DomainBoundary, Fracture,
    LinearData, Point,
};
use frax::linsolve::{cg_solve, ordering, CholeskyFactor, LuFactor, Ordering, Preconditioner, SparseMatrix};
use frax::mesh::{barycentric, check_conforming, immerse_fracture, refine_uniform_with_parents, SimplicialMesh, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tol() -> f64 {
    default_tolerance(2f64.sqrt())
}

fn mixed_boundary() -> DomainBoundary {
    let d = BoundaryCondition::dirichlet(LinearData { c0: 0.5, cx: 1.0, cy: -0.25 });
    let n = BoundaryCondition::neumann(LinearData { c0: 0.1, cx: 0.0, cy: 0.3 });
    DomainBoundary::rectangle(0., 0., 1., 1., [d, n, d, BoundaryCondition::no_flow()]).unwrap()
}

fn permeability_at(x: &Point) -> Tensor {
    let a = 1.0 + x.x * x.x;
    let b = 2.0 + (3.0 * x.y).sin();
    Tensor::new(a, 0.3 * x.x, 0.3 * x.x, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn refinement_conserves_area_and_nests_children(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = random_mesh(&mut rng);
        let (fine, parents) = refine_uniform_with_parents(&mesh);
        prop_assert_eq!(fine.num_cells(), 4 * mesh.num_cells());
        prop_assert!((fine.total_area() - mesh.total_area()).abs() < 1e-14);
        for c in 0..fine.num_cells() {
            let lambda = barycentric(&mesh.cell_points(parents[c]), &fine.centroid(c));
            prop_assert!(lambda.iter().all(|&l| l > -1e-12));
            prop_assert!((fine.area(c) - mesh.area(parents[c]) / 4.0).abs() < 1e-14);
        }
        fine.validate(tol()).unwrap();
    }

    #[test]
    fn immersion_is_valid_conserving_and_idempotent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = random_mesh(&mut rng);
        let (a, b) = random_segment(&mut rng);
        let f = Fracture::conductive(a, b, 1e-3, 1.0).unwrap();
        let once = immerse_fracture(&mesh, 0, &f, tol()).unwrap();
        once.validate(tol()).unwrap();
        prop_assert!((once.total_area() - mesh.total_area()).abs() <= 1e-12 * mesh.total_area());
        prop_assert!(check_conforming(&once, 0, &f, tol()));
        prop_assert!(once.num_cells() >= mesh.num_cells());
        let twice = immerse_fracture(&once, 0, &f, tol()).unwrap();
        prop_assert_eq!(twice.num_cells(), once.num_cells());
        prop_assert_eq!(twice.num_vertices(), once.num_vertices());
    }

    #[test]
    fn intersection_sets_partition_the_special_points(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=5);
        let network: Vec<Fracture> = (0..k)
            .map(|_| {
                let (a, b) = random_segment(&mut rng);
                Fracture::conductive(a, b, 1e-3, 1.0).unwrap()
            })
            .collect();
        let sets = classify_intersections(&network, &mixed_boundary(), tol()).unwrap();
        // brute-force oracle: endpoints and pairwise crossings, deduplicated
        let mut points: Vec<Point> = network.iter().flat_map(|f| [f.a, f.b]).collect();
        for i in 0..k {
            for j in i + 1..k {
                let hit = segment_intersection((network[i].a, network[i].b), (network[j].a, network[j].b), tol());
                if let Some(x) = hit.unwrap() {
                    points.push(x);
                }
            }
        }
        let mut distinct: Vec<Point> = Vec::new();
        for x in points {
            if !distinct.iter().any(|q| (q - x).norm() <= tol()) {
                distinct.push(x);
            }
        }
        prop_assert_eq!(sets.len(), distinct.len());
        for x in &distinct {
            let hits = sets.iter().filter(|(_, q)| (*q - x).norm() <= tol()).count();
            prop_assert_eq!(hits, 1);
        }
        // every point is interior, so only crossings and tips occur
        prop_assert!(sets.cb.is_empty() && sets.cm_dirichlet.is_empty() && sets.cm_neumann.is_empty());
    }

    #[test]
    fn flow_is_invariant_under_renumbering(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = random_segment(&mut rng);
        let channel = Fracture::conductive(a, b, 1e-2, 50.0).unwrap();
        let barrier = loop {
            let (a, b) = random_segment(&mut rng);
            if segment_intersection((a, b), (channel.a, channel.b), tol()).unwrap().is_none() {
                break Fracture::blocking(a, b, 1e-2, 1e-2).unwrap();
            }
        };
        let network = [channel.clone(), barrier];
        let mesh = immerse_fracture(&random_mesh(&mut rng), 0, &channel, tol()).unwrap();

        let nv = mesh.num_vertices();
        let mut vperm: Vec<usize> = (0..nv).collect();
        vperm.shuffle(&mut rng);
        let mut cperm: Vec<usize> = (0..mesh.num_cells()).collect();
        cperm.shuffle(&mut rng);
        let mut vertices = vec![p(0.0, 0.0); nv];
        for v in 0..nv {
            vertices[vperm[v]] = mesh.vertex(v);
        }
        let mut cells = vec![[0; 3]; mesh.num_cells()];
        for c in 0..mesh.num_cells() {
            let [x, y, z] = mesh.cell(c);
            let shift = rng.gen_range(0..3);
            let mut local = [vperm[x], vperm[y], vperm[z]];
            local.rotate_left(shift);
            cells[cperm[c]] = local;
        }
        let shuffled = SimplicialMesh::new(vertices, cells).unwrap();

        let solve_on = |mut m: SimplicialMesh| {
            for c in 0..m.num_cells() {
                let k = permeability_at(&m.centroid(c));
                m.set_permeability(c, k);
            }
            let mut problem = fractured_problem(m, &network, mixed_boundary());
            for c in 0..problem.mesh.num_cells() {
                let x = problem.mesh.centroid(c);
                problem.source[c] = x.x - x.y;
            }
            let (sol, _) = solve_checked(&problem, FlowSolver::Cholesky).unwrap();
            sol
        };
        let base = solve_on(mesh.clone());
        let other = solve_on(shuffled);
        prop_assert_eq!(base.num_dofs, other.num_dofs);
        let scale = base.cell_pressure.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for c in 0..mesh.num_cells() {
            prop_assert!((base.cell_pressure[c] - other.cell_pressure[cperm[c]]).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn sparse_solvers_agree_with_dense_lu(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // random sparse SPD matrix: B Bᵀ + n I from a sparse B
        let mut dense = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for _ in 0..3 {
                let j = rng.gen_range(0..n);
                dense[(i, j)] += rng.gen_range(-1.0..1.0);
            }
        }
        let spd = &dense * dense.transpose() + nalgebra::DMatrix::identity(n, n) * n as f64 * 0.1;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| spd[(i, j)]).collect()).collect();
        let m = SparseMatrix::from_dense(&rows);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = spd.clone().lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
        for kind in [Ordering::Natural, Ordering::ReverseCuthillMcKee, Ordering::NestedDissection] {
            let perm = ordering(&m, kind);
            let mut seen = perm.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let x = CholeskyFactor::factor(&m, kind).unwrap().solve(&b);
            for i in 0..n {
                prop_assert!((x[i] - want[i]).abs() < 1e-9 * (1.0 + want.amax()));
            }
        }
        let (x, _) = cg_solve(&m, &b, 1e-13, 10 * n, Preconditioner::Jacobi).unwrap();
        for i in 0..n {
            prop_assert!((x[i] - want[i]).abs() < 1e-8 * (1.0 + want.amax()));
        }

        // nonsymmetric: perturb one triangle
        let mut general = spd.clone();
        for i in 0..n {
            for j in 0..i {
                if general[(i, j)] != 0.0 {
                    general[(i, j)] *= rng.gen_range(0.0..2.0);
                }
            }
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| general[(i, j)]).collect()).collect();
        if let Some(want) = general.clone().lu().solve(&nalgebra::DVector::from_vec(b.clone())) {
            let lu = LuFactor::factor(&SparseMatrix::from_dense(&rows), Ordering::NestedDissection, 0.1);
            if let Ok(lu) = lu {
                let x = lu.solve(&b);
                let r = &general * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b.clone());
                prop_assert!(r.amax() < 1e-9 * (1.0 + want.amax()) * general.amax());
            }
        }
    }

    #[test]
    fn triplet_assembly_matches_dense(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let mut dense = vec![vec![0.0; c]; r];
        let mut triplets = Vec::new();
        for _ in 0..rng.gen_range(0..60) {
            let (i, j, v) = (rng.gen_range(0..r), rng.gen_range(0..c), rng.gen_range(-1.0..1.0));
            dense[i][j] += v;
            triplets.push((i, j, v));
        }
        let m = SparseMatrix::from_triplets(r, c, &triplets);
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = m.mul_vec(&x);
        for i in 0..r {
            let want: f64 = (0..c).map(|j| dense[i][j] * x[j]).sum();
            prop_assert!((y[i] - want).abs() < 1e-12);
        }
        prop_assert_eq!(m.transpose().transpose().to_dense(), m.to_dense());
    }
}

#[test]
fn special_points_are_unique_across_benchmarks() {
    for id in frax::bench::BenchmarkId::ALL.into_iter().filter(|&id| id != frax::bench::BenchmarkId::Sotra2d) {
        let b = frax::bench::build_benchmark(id, 0).unwrap();
        let t = default_tolerance(b.boundary.diameter());
        let mut seen = HashSet::new();
        for (_, x) in b.sets.iter() {
            let key = ((x.x / t).round() as i64, (x.y / t).round() as i64);
            assert!(seen.insert(key), "{id}: duplicate point {x}");
        }
    }
}
