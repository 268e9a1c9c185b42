use std::f64::consts::PI;
use std::sync::Arc;

use cubelet::decomp::linear_distribution;
use cubelet::field::{Field, Quantity};
use cubelet::halo::{Boundary, BoundaryConditions};
use cubelet::mesh::{cell_center, generate_mesh, Aabb, MeshSpec, RefineRegion};
use cubelet::parallel::run_ranks;
use cubelet::solver::multigrid::{MgConfig, MgReport, Multigrid};
use cubelet::solver::Geometry;

/// Solve the cosine manufactured problem; returns (max error, report).
fn manufactured(n: usize, root: f64, ranks: usize, cfg: MgConfig) -> (f64, MgReport) {
    let mesh = Arc::new(
        generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), root, n)).unwrap(),
    );
    let dist = linear_distribution(mesh.len(), ranks).unwrap();
    let geom = Geometry::new(mesh.clone(), dist).unwrap();
    let exact = |x: [f64; 3]| (PI * x[0]).cos() * (PI * x[1]).cos() * (PI * x[2]).cos();
    let out = run_ranks(ranks, 1, None, |ctx| {
        let lay = geom.layout();
        let gids = geom.dist.local_cubes(ctx.rank()).to_vec();
        let mut mg = Multigrid::new(&geom, ctx, BoundaryConditions::all(Boundary::Slip), cfg);
        let mut p = Field::new(Quantity::Pressure, 1, lay, gids.len());
        let mut rhs = Field::new(Quantity::Scratch, 1, lay, gids.len());
        for (li, &g) in gids.iter().enumerate() {
            for idx in lay.interior() {
                rhs.cubes[li][idx] =
                    -3.0 * PI * PI * exact(cell_center(mesh.cube(g), lay.coords(idx)));
            }
        }
        let rep = mg.solve(&mut p, &rhs, ctx, true)?;
        let mut err = 0.0f64;
        for (li, &g) in gids.iter().enumerate() {
            for idx in lay.interior() {
                err = err.max(
                    (p.cubes[li][idx] - exact(cell_center(mesh.cube(g), lay.coords(idx)))).abs(),
                );
            }
        }
        Ok((ctx.max(err)?, rep))
    })
    .unwrap();
    out.into_iter().next().unwrap()
}

#[test]
fn second_order_and_fast_convergence() {
    // plain V-cycles, so the factors are those of the cycle itself
    let plain = MgConfig {
        krylov_restart: 0,
        ..Default::default()
    };
    let (e1, r1) = manufactured(8, 0.5, 1, plain);
    let (e2, r2) = manufactured(16, 0.5, 1, plain);
    println!("errors {e1:.3e} {e2:.3e} ratio {:.3}", e1 / e2);
    println!("factors {:?} / {:?}", r1.factors, r2.factors);
    assert!(r1.converged && r2.converged);
    assert!((e1 / e2 - 4.0).abs() < 0.5);
    let worst = r2.factors.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= 0.2, "V-cycle factor {worst}");
}

#[test]
fn many_cubes_and_ranks() {
    let (e1, r1) = manufactured(4, 0.125, 1, MgConfig::default());
    let (e4, r4) = manufactured(4, 0.125, 4, MgConfig::default());
    println!("8^3 cubes of 4^3: err {e1:.3e} factors {:?}", r1.factors);
    assert_eq!(e1.to_bits(), e4.to_bits());
    assert_eq!(r1, r4);
}

/// Refined mesh with an outflow face: the Krylov-accelerated cycle reaches
/// the tolerance, agrees with plain cycles, and is rank-count independent.
#[test]
fn krylov_on_refined_mesh() {
    let mut spec = MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), 0.25, 4);
    spec.n_levels = 3;
    spec.refine.push(RefineRegion {
        region: Aabb::new([0.3; 3], [0.6; 3]),
        level: 2,
    });
    let mesh = Arc::new(generate_mesh(&spec).unwrap());
    let mut bc = BoundaryConditions::all(Boundary::Slip);
    bc.faces[1] = Boundary::Outflow;
    let solve = |ranks: usize, cfg: MgConfig| {
        let geom = Geometry::new(
            mesh.clone(),
            linear_distribution(mesh.len(), ranks).unwrap(),
        )
        .unwrap();
        run_ranks(ranks, 1, None, |ctx| {
            let lay = geom.layout();
            let gids = geom.dist.local_cubes(ctx.rank()).to_vec();
            let mut mg = Multigrid::new(&geom, ctx, bc, cfg);
            let mut p = Field::new(Quantity::Pressure, 1, lay, gids.len());
            let mut rhs = Field::new(Quantity::Scratch, 1, lay, gids.len());
            for (li, &g) in gids.iter().enumerate() {
                for idx in lay.interior() {
                    let x = cell_center(mesh.cube(g), lay.coords(idx));
                    rhs.cubes[li][idx] = (-20.0
                        * ((x[0] - 0.45).powi(2) + (x[1] - 0.5).powi(2) + (x[2] - 0.4).powi(2)))
                    .exp();
                }
            }
            let rep = mg.solve(&mut p, &rhs, ctx, true)?;
            let vals: Vec<(usize, Vec<f64>)> = gids
                .iter()
                .zip(&p.cubes)
                .map(|(&g, a)| (g, lay.interior().map(|i| a[i]).collect()))
                .collect();
            Ok((rep, ctx.gather_by_cube_vec(&vals)?))
        })
        .unwrap()
        .remove(0)
    };
    let (kr, pk) = solve(1, MgConfig::default());
    let (plain, pp) = solve(
        1,
        MgConfig {
            krylov_restart: 0,
            max_cycles: 200,
            ..Default::default()
        },
    );
    println!("krylov {} cycles, plain {} cycles", kr.cycles, plain.cycles);
    assert!(kr.converged && plain.converged);
    assert!(kr.cycles <= plain.cycles);
    let diff = pk
        .iter()
        .zip(&pp)
        .flat_map(|(a, b)| a.1.iter().zip(&b.1).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    let scale = pp
        .iter()
        .flat_map(|a| a.1.iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    assert!(diff <= 1e-6 * scale, "{diff} vs {scale}");
    let (k3, p3) = solve(3, MgConfig::default());
    assert_eq!(k3, kr);
    assert_eq!(p3, pk);
}
