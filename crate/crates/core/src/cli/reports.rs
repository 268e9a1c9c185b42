//! Diagnostic reports: load-balance sweep, compression table, mesh summary.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use super::config::CaseConfig;
use super::run::Case;
use crate::decomp::{linear_distribution, partition_lagrangian};
use crate::error::Result;
use crate::halo::{Boundary, BoundaryConditions};
use crate::io::compress::{compress_cube, decompress_cube, Mode};
use crate::lagrangian::{assign_sets, discretize_surface, ParticleSet, RigidBody};
use crate::loadbalance::{plan_rebalance, rebalance, BalanceConfig};
use crate::mesh::{cell_center, generate_mesh, Aabb, MeshSpec, SurfaceRefine};
use crate::parallel::run_ranks;
use crate::solver::{Geometry, Solver, SolverConfig, HALO};

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceRow {
    pub gamma: f64,
    pub before: f64,
    pub after: f64,
    pub cubes_moved: usize,
    pub seconds_unbalanced: f64,
    pub seconds_balanced: f64,
}

/// Synthetic clustered-particle case: a small body near one corner of a
/// channel, so particles and fine cubes pile up on the first ranks. Without
/// particles the body and its refinement are left out entirely.
fn clustered_case(
    with_particles: bool,
) -> Result<(Arc<crate::mesh::BcmMesh>, Vec<RigidBody>, Vec<ParticleSet>)> {
    let body = RigidBody::sphere(0, [0.35, 0.3, 0.3], 0.15, 3);
    let mut spec = MeshSpec::uniform(Aabb::new([0.0; 3], [2.0, 1.0, 1.0]), 0.5, 8);
    if with_particles {
        spec.n_levels = 2;
        spec.surface_refine.push(SurfaceRefine {
            triangles: body.triangles.clone(),
            distance: 0.05,
            level: 1,
        });
    }
    let mesh = Arc::new(generate_mesh(&spec)?);
    let (bodies, sets) = if with_particles {
        let sets = assign_sets(&discretize_surface(&body, &mesh, 0)?, &mesh)?;
        (vec![body], sets)
    } else {
        (Vec::new(), (0..mesh.len()).map(ParticleSet::new).collect())
    };
    Ok((mesh, bodies, sets))
}

/// For each gamma: estimated imbalance before and after balancing, and the
/// wall time per step of `steps` steps on the original and on the balanced
/// layout.
pub fn balance_report(
    ranks: usize,
    threads: usize,
    steps: usize,
    gammas: &[f64],
    with_particles: bool,
) -> Result<Vec<BalanceRow>> {
    let (mesh, bodies, sets) = clustered_case(with_particles)?;
    let mut bc = BoundaryConditions::all(Boundary::Slip);
    bc.faces[0] = Boundary::Inflow([1.0, 0.0, 0.0]);
    bc.faces[1] = Boundary::Outflow;
    let cfg = SolverConfig {
        dt: 0.005,
        ..Default::default()
    };
    let dist0 = linear_distribution(mesh.len(), ranks)?;
    let geom0 = Geometry::new(mesh.clone(), dist0.clone())?;
    let per_rank = partition_lagrangian(sets.clone(), &dist0);
    let mut rows = Vec::new();
    for &gamma in gammas {
        let bal = BalanceConfig {
            gamma,
            ..BalanceConfig::default()
        };
        let times = run_ranks(ranks, threads, None, |ctx| {
            let time = |balanced: bool| -> Result<(f64, f64, f64, usize)> {
                let mut geom = geom0.with_distribution(dist0.clone());
                let s = Solver::new(&geom, ctx, cfg, bc)?;
                let mut st = s.new_state();
                for a in &mut st.u.cubes {
                    let v = a.len() / 3;
                    a[..v].fill(1.0);
                }
                let mut local = per_rank[ctx.rank().0].clone();
                let (mut before, mut after, mut moved) = (0.0, 0.0, 0);
                if balanced {
                    let (out, _) = rebalance(ctx, &geom, &mut st, &mut local, &bal)?;
                    before = out.before.ratio;
                    after = out.after.ratio;
                    moved = out.cubes_moved;
                    if let Some(d) = out.distribution {
                        geom = geom.with_distribution(d);
                    }
                }
                let mut s = Solver::new(&geom, ctx, cfg, bc)?;
                ctx.ep.barrier();
                let start = Instant::now();
                for _ in 0..steps {
                    s.step(&mut st, &mut local, &bodies, ctx)?;
                }
                ctx.ep.barrier();
                Ok((
                    start.elapsed().as_secs_f64() / steps.max(1) as f64,
                    before,
                    after,
                    moved,
                ))
            };
            let plain = time(false)?;
            let balanced = time(true)?;
            Ok((plain.0, balanced))
        })?;
        let (plain, (balanced, before, after, moved)) = times[0];
        rows.push(BalanceRow {
            gamma,
            before,
            after,
            cubes_moved: moved,
            seconds_unbalanced: plain,
            seconds_balanced: balanced,
        });
    }
    Ok(rows)
}

pub fn balance_table(rows: &[BalanceRow]) -> String {
    let mut s = String::from("gamma,imbalance_before,imbalance_after,cubes_moved,s_per_step_unbalanced,s_per_step_balanced\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{},{:.4},{:.4}",
            r.gamma, r.before, r.after, r.cubes_moved, r.seconds_unbalanced, r.seconds_balanced
        );
    }
    s
}

/// Estimated imbalance of the case in `cfg` under the linear layout, and
/// what one balancing pass would reach.
pub fn balance_estimate(cfg: &CaseConfig) -> Result<(f64, f64)> {
    let case = Case::build(cfg)?;
    let dist = linear_distribution(case.mesh.len(), cfg.parallel.ranks)?;
    let counts: Vec<usize> = case.sets.iter().map(ParticleSet::len).collect();
    let out = plan_rebalance(&case.mesh, &dist, &counts, &cfg.balance_config())?;
    Ok((out.before.ratio, out.after.ratio))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressRow {
    pub cells: usize,
    /// Relative tolerance; `None` for lossless.
    pub tolerance: Option<f64>,
    pub ratio: f64,
    /// Max error over the field range.
    pub error: f64,
}

/// Velocity of a smooth vortical test flow.
pub fn smooth_field(x: [f64; 3]) -> [f64; 3] {
    use std::f64::consts::PI;
    let (a, b, c) = ((PI * x[0]).sin(), (PI * x[1]).sin(), (PI * x[2]).sin());
    let (ca, cb, cc) = ((PI * x[0]).cos(), (PI * x[1]).cos(), (PI * x[2]).cos());
    [a * cb * cc, -ca * b * cc + 0.2 * x[0], 0.3 * c * a]
}

/// Compression ratio and error of the smooth field over a unit box of
/// `root`-sized cubes, for each cube resolution and tolerance.
pub fn compress_bench(cells: &[usize], tolerances: &[f64]) -> Result<Vec<CompressRow>> {
    let mut rows = Vec::new();
    for &n in cells {
        let mesh = generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), 0.5, n))?;
        let side = n + 2 * HALO;
        let v = side * side * side;
        let cubes: Vec<Vec<f64>> = mesh
            .cubes()
            .iter()
            .map(|cube| {
                let mut a = vec![0.0; 3 * v];
                for idx in 0..v {
                    let c = [
                        (idx % side) as i64 - HALO as i64,
                        ((idx / side) % side) as i64 - HALO as i64,
                        (idx / (side * side)) as i64 - HALO as i64,
                    ];
                    let u = smooth_field(cell_center(cube, c));
                    for k in 0..3 {
                        a[k * v + idx] = u[k];
                    }
                }
                a
            })
            .collect();
        let all = cubes.iter().flatten();
        let (lo, hi) = all.fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        let range = hi - lo;
        let raw = (cubes.len() * 3 * v * 8) as f64;
        let modes = std::iter::once((None, Mode::Lossless)).chain(
            tolerances
                .iter()
                .map(|&t| (Some(t), Mode::lossy_for_tolerance(t * range))),
        );
        for (tolerance, mode) in modes {
            let mut bytes = 0usize;
            let mut err = 0.0f64;
            for a in &cubes {
                let s = compress_cube(a, side, 3, mode);
                bytes += s.len();
                let b = decompress_cube(&s, side, 3)?;
                err = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(err, f64::max);
            }
            rows.push(CompressRow {
                cells: n,
                tolerance,
                ratio: raw / bytes as f64,
                error: err / range,
            });
        }
    }
    Ok(rows)
}

pub fn compress_table(rows: &[CompressRow]) -> String {
    let mut s = String::from(
        "cells_per_edge,tolerance,ratio,max_error_over_range,in_reference_band_4_to_15\n",
    );
    for r in rows {
        let tol = r.tolerance.map_or("lossless".into(), |t| format!("{t:e}"));
        let band = (4.0..=15.0).contains(&r.ratio);
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.3e},{}",
            r.cells, tol, r.ratio, r.error, band
        );
    }
    s
}

pub fn mesh_stats(cfg: &CaseConfig) -> Result<String> {
    let case = Case::build(cfg)?;
    let st = case.mesh.stats();
    let mut s = String::new();
    let _ = writeln!(s, "level,cubes,cells,cell_spacing");
    for (l, &n) in st.cubes_per_level.iter().enumerate() {
        let dx = cfg.domain.root_edge / f64::from(1u32 << l) / case.mesh.n_cells_per_edge() as f64;
        let _ = writeln!(s, "{l},{n},{},{dx:e}", n * st.cells_per_cube);
    }
    let _ = writeln!(s, "total,{},{},", st.total_cubes, st.total_cells);
    for b in &case.bodies {
        let n = case
            .sets
            .iter()
            .flat_map(|s| s.iter())
            .filter(|p| p.body_id == b.body_id)
            .count();
        let _ = writeln!(
            s,
            "body {}: {} triangles, area {:.6}, {} particles",
            b.body_id,
            b.triangles.len(),
            b.surface_area(),
            n
        );
    }
    let dist = linear_distribution(case.mesh.len(), cfg.parallel.ranks)?;
    let _ = writeln!(
        s,
        "cubes per rank ({} ranks): {:?}",
        cfg.parallel.ranks,
        dist.counts()
    );
    let (before, after) = balance_estimate(cfg)?;
    let _ = writeln!(
        s,
        "estimated imbalance {before:.4}, after balancing {after:.4}"
    );
    Ok(s)
}
