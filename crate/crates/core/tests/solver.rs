use std::f64::consts::PI;
use std::sync::Arc;

use cubelet::decomp::linear_distribution;
use cubelet::decomp::partition_lagrangian;
use cubelet::halo::{exchange, Boundary, BoundaryConditions};
use cubelet::lagrangian::{assign_sets, discretize_surface, ParticleSet, RigidBody};
use cubelet::mesh::{cell_center, generate_mesh, Aabb, BcmMesh, MeshSpec};
use cubelet::parallel::{run_ranks, RankCtx};
use cubelet::solver::ops::gradient;
use cubelet::solver::{FlowState, Geometry, Integrator, Solver, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_mesh(n: usize, root: f64) -> Arc<BcmMesh> {
    Arc::new(generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), root, n)).unwrap())
}

fn init_velocity(
    solver: &Solver,
    mesh: &BcmMesh,
    st: &mut FlowState,
    f: impl Fn([f64; 3]) -> [f64; 3],
) {
    let lay = solver.layout();
    let v = lay.volume();
    for (li, &g) in solver.local_gids().iter().enumerate() {
        for idx in lay.interior() {
            let u = f(cell_center(mesh.cube(g), lay.coords(idx)));
            for c in 0..3 {
                st.u.cubes[li][c * v + idx] = u[c];
            }
        }
    }
}

fn taylor_green(x: [f64; 3]) -> [f64; 3] {
    [
        (PI * x[0]).sin() * (PI * x[1]).cos(),
        -(PI * x[0]).cos() * (PI * x[1]).sin(),
        0.0,
    ]
}

/// Energy history of a Taylor-Green run on the unit box with slip walls.
fn tg_energy(cfg: SolverConfig, steps: usize) -> Vec<f64> {
    let mesh = unit_mesh(8, 0.5);
    let geom = Geometry::new(mesh.clone(), linear_distribution(mesh.len(), 1).unwrap()).unwrap();
    run_ranks(1, 1, None, |ctx| {
        let mut s = Solver::new(&geom, ctx, cfg, BoundaryConditions::all(Boundary::Slip))?;
        let mut st = s.new_state();
        init_velocity(&s, &mesh, &mut st, taylor_green);
        let mut e = vec![s.kinetic_energy(&st, ctx)?];
        let mut sets: Vec<ParticleSet> = Vec::new();
        for _ in 0..steps {
            s.step(&mut st, &mut sets, &[], ctx)?;
            e.push(s.kinetic_energy(&st, ctx)?);
        }
        Ok(e)
    })
    .unwrap()
    .remove(0)
}

#[test]
fn diffusion_decay_rate() {
    let nu = 0.1;
    let cfg = SolverConfig {
        mu: nu,
        dt: 0.002,
        integrator: Integrator::Euler,
        convection: false,
        ..Default::default()
    };
    let e = tg_energy(cfg, 50);
    assert!(e.windows(2).all(|w| w[1] < w[0]), "monotone decay");
    let t = 50.0 * cfg.dt;
    let expect = (-2.0 * nu * 2.0 * PI * PI * t).exp();
    let got = e[50] / e[0];
    println!("energy ratio {got:.5} expected {expect:.5}");
    assert!((got / expect - 1.0).abs() < 0.05);
}

#[test]
fn crank_nicolson_stable_beyond_explicit_limit() {
    let nu = 0.1;
    let dx: f64 = 1.0 / 16.0;
    let cfg = SolverConfig {
        mu: nu,
        dt: 0.5 * dx * dx / nu,
        integrator: Integrator::CrankNicolson,
        convection: false,
        ..Default::default()
    };
    let e = tg_energy(cfg, 20);
    assert!(e.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn inviscid_energy_drift_is_small() {
    for dt in [0.004, 0.002] {
        let cfg = SolverConfig {
            mu: 0.0,
            dt,
            ..Default::default()
        };
        let e = tg_energy(cfg, 10);
        let worst = e
            .windows(2)
            .map(|w| ((w[1] - w[0]) / w[0]).abs())
            .fold(0.0, f64::max);
        println!("dt {dt}: worst relative energy change per step {worst:.3e}");
        assert!(worst < 1e-3);
    }
}

#[test]
fn ab2_first_step_is_euler() {
    let run = |integrator| {
        let cfg = SolverConfig {
            integrator,
            dt: 0.003,
            ..Default::default()
        };
        tg_energy(cfg, 1)
    };
    assert_eq!(run(Integrator::Ab2), run(Integrator::Euler));
}

#[test]
fn zero_state_is_a_fixed_point() {
    let mut spec = MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), 0.5, 8);
    spec.n_levels = 2;
    let mesh = Arc::new(generate_mesh(&spec).unwrap());
    let geom = Geometry::new(mesh.clone(), linear_distribution(mesh.len(), 2).unwrap()).unwrap();
    let body = RigidBody::sphere(0, [0.5; 3], 0.2, 2);
    let particles = discretize_surface(&body, &mesh, 0).unwrap();
    let per_rank = partition_lagrangian(assign_sets(&particles, &mesh).unwrap(), &geom.dist);
    run_ranks(2, 1, None, |ctx| {
        let mut s = Solver::new(
            &geom,
            ctx,
            SolverConfig::default(),
            BoundaryConditions::all(Boundary::NoSlip),
        )?;
        let mut st = s.new_state();
        let mut sets = per_rank[ctx.rank().0].clone();
        for _ in 0..3 {
            let r = s.step(&mut st, &mut sets, std::slice::from_ref(&body), ctx)?;
            assert_eq!(r.force, [0.0; 3]);
        }
        assert!(st
            .u
            .cubes
            .iter()
            .chain(&st.p.cubes)
            .all(|a| a.iter().all(|&x| x == 0.0)));
        Ok(())
    })
    .unwrap();
}

fn random_step_divergence(ranks: usize) -> (f64, f64, f64) {
    let mesh = unit_mesh(8, 0.5);
    let geom = Geometry::new(
        mesh.clone(),
        linear_distribution(mesh.len(), ranks).unwrap(),
    )
    .unwrap();
    let out = run_ranks(ranks, 1, None, |ctx: &RankCtx| {
        let cfg = SolverConfig {
            dt: 0.001,
            ..Default::default()
        };
        let mut s = Solver::new(&geom, ctx, cfg, BoundaryConditions::all(Boundary::Slip))?;
        let mut st = s.new_state();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // same global data for any rank count: draw per cell by global id
        let lay = s.layout();
        let v = lay.volume();
        for (li, &g) in s.local_gids().iter().enumerate() {
            let mut r = ChaCha8Rng::seed_from_u64(g as u64);
            for c in 0..3 {
                for idx in lay.interior() {
                    st.u.cubes[li][c * v + idx] = r.gen_range(-1.0..1.0);
                }
            }
        }
        let _ = rng.gen::<u8>();
        let mut sets: Vec<ParticleSet> = Vec::new();
        let rep = s.step(&mut st, &mut sets, &[], ctx)?;
        let div = s.divergence_max(&mut st, ctx)?;
        Ok((div, rep.div_star, rep.mg.rel_residual))
    })
    .unwrap();
    out[0]
}

#[test]
fn projection_removes_divergence() {
    let (div, div_star, res) = random_step_divergence(1);
    println!("div {div:.3e} div* {div_star:.3e} residual {res:.3e}");
    assert!(div <= 10.0 * 1e-8 * div_star);
    let (div2, ..) = random_step_divergence(2);
    assert_eq!(div.to_bits(), div2.to_bits());
}

#[test]
fn gradient_sums_to_boundary_pressure_flux() {
    let mesh = unit_mesh(8, 0.5);
    let geom = Geometry::new(mesh.clone(), linear_distribution(mesh.len(), 2).unwrap()).unwrap();
    let mut bc = BoundaryConditions::all(Boundary::Slip);
    bc.faces[1] = Boundary::Outflow;
    bc.faces[4] = Boundary::Inflow([0.0, 0.0, 1.0]);
    let out = run_ranks(2, 1, None, |ctx| {
        let s = Solver::new(&geom, ctx, SolverConfig::default(), bc)?;
        let mut st = s.new_state();
        let lay = s.layout();
        let v = lay.volume();
        let n = lay.cells as i64;
        for (li, &g) in s.local_gids().iter().enumerate() {
            let mut r = ChaCha8Rng::seed_from_u64(100 + g as u64);
            for idx in lay.interior() {
                st.p.cubes[li][idx] = r.gen_range(-1.0..1.0);
            }
        }
        exchange(&mut st.p, s.plan(), &ctx.ep)?;
        let mut vol = [0.0; 3];
        let mut surf = [0.0; 3];
        let mut g = vec![0.0; 3 * v];
        for (li, &gid) in s.local_gids().iter().enumerate() {
            let cube = mesh.cube(gid);
            let dx = cube.cell_spacing;
            let p = &st.p.cubes[li];
            gradient(p, lay, dx, &mut g);
            for idx in lay.interior() {
                for a in 0..3 {
                    vol[a] += g[a * v + idx] * dx.powi(3);
                }
                let c = lay.coords(idx);
                let x = cell_center(cube, c);
                for a in 0..3 {
                    for (side, dir) in [(0, -1i64), (n - 1, 1)] {
                        let wall = x[a] + dir as f64 * dx;
                        if c[a] == side && !(0.0..=1.0).contains(&wall) {
                            let mut o = c;
                            o[a] += dir;
                            let pf = 0.5 * (p[idx] + p[lay.index(o[0], o[1], o[2])]);
                            surf[a] += dir as f64 * pf * dx * dx;
                        }
                    }
                }
            }
        }
        Ok((vol, surf))
    })
    .unwrap();
    for a in 0..3 {
        let vol: f64 = out.iter().map(|o| o.0[a]).sum();
        let surf: f64 = out.iter().map(|o| o.1[a]).sum();
        assert!((vol - surf).abs() < 1e-13, "axis {a}: {vol} vs {surf}");
    }
}
