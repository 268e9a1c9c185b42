use std::sync::Arc;

use cubelet::decomp::linear_distribution;
use cubelet::field::{Field, Layout, Quantity};
use cubelet::halo::{exchange, reverse_exchange, Boundary, BoundaryConditions, ExchangePlan, HaloMap};
use cubelet::interaction::{interpolate, spread};
use cubelet::mesh::{cell_center, generate_mesh, Aabb, BcmMesh, MeshSpec};
use cubelet::parallel::run_ranks;
use cubelet::solver::HALO;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cell value as a function of the global cell centre only, so meshes that
/// tile the same cells hold the same data.
fn value(x: [f64; 3], c: usize) -> f64 {
    let key = x.iter().fold(c as u64, |h, v| h.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (v * 64.0).round() as u64);
    ChaCha8Rng::seed_from_u64(key).gen_range(-1.0..1.0)
}

fn mesh(root: f64, n: usize) -> Arc<BcmMesh> {
    Arc::new(generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), root, n)).unwrap())
}

/// Particles just either side of the faces at 0.5, plus one at an edge corner.
const POINTS: [[f64; 3]; 4] = [[0.49, 0.3, 0.7], [0.51, 0.47, 0.52], [0.498, 0.502, 0.3], [0.2, 0.53, 0.505]];

/// Interpolated velocity at each point; `ranks` ranks over `m`.
fn interpolated(m: &Arc<BcmMesh>, ranks: usize) -> Vec<[f64; 3]> {
    let lay = Layout::new(m.n_cells_per_edge(), HALO);
    let map = HaloMap::build(m, lay).unwrap();
    let dist = linear_distribution(m.len(), ranks).unwrap();
    let out = run_ranks(ranks, 1, None, |ctx| {
        let plan = ExchangePlan::new(&map, &dist, ctx.rank(), BoundaryConditions::all(Boundary::Slip));
        let gids = dist.local_cubes(ctx.rank()).to_vec();
        let v = lay.volume();
        let mut u = Field::new(Quantity::Velocity, 3, lay, gids.len());
        for (li, &g) in gids.iter().enumerate() {
            for idx in lay.interior() {
                let x = cell_center(m.cube(g), lay.coords(idx));
                for c in 0..3 {
                    u.cubes[li][c * v + idx] = value(x, c);
                }
            }
        }
        exchange(&mut u, &plan, &ctx.ep)?;
        let mut found = Vec::new();
        for (k, &x) in POINTS.iter().enumerate() {
            let g = m.locate_cube(x).unwrap();
            if dist.owner(g) == ctx.rank() {
                let mut o = [0.0; 3];
                interpolate(&u, dist.local_index(g), m.cube(g), x, &mut o);
                found.push((k, o));
            }
        }
        Ok(found)
    })
    .unwrap();
    let mut res = vec![[f64::NAN; 3]; POINTS.len()];
    for (k, o) in out.into_iter().flatten() {
        res[k] = o;
    }
    res
}

#[test]
fn multi_cube_interpolation_matches_single_cube() {
    let single = interpolated(&mesh(1.0, 16), 1);
    let eight = mesh(0.5, 8);
    for ranks in [1, 2, 4] {
        let got = interpolated(&eight, ranks);
        for (a, b) in single.iter().zip(&got) {
            for c in 0..3 {
                assert_eq!(a[c].to_bits(), b[c].to_bits(), "P={ranks}: {a:?} vs {b:?}");
            }
        }
    }
}

/// Spread `F` at each point, reverse-exchange, and return the global cell
/// values keyed by cell centre, plus the total `sum f dV`.
fn spread_cells(m: &Arc<BcmMesh>, ranks: usize, forces: &[[f64; 3]], dc: f64) -> (Vec<([u64; 3], [f64; 3])>, [f64; 3]) {
    let lay = Layout::new(m.n_cells_per_edge(), HALO);
    let map = HaloMap::build(m, lay).unwrap();
    let dist = linear_distribution(m.len(), ranks).unwrap();
    let out = run_ranks(ranks, 1, None, |ctx| {
        let plan = ExchangePlan::new(&map, &dist, ctx.rank(), BoundaryConditions::all(Boundary::Slip));
        let gids = dist.local_cubes(ctx.rank()).to_vec();
        let v = lay.volume();
        let mut f = Field::new(Quantity::Force, 3, lay, gids.len());
        for (&x, fp) in POINTS.iter().zip(forces) {
            let g = m.locate_cube(x).unwrap();
            if dist.owner(g) == ctx.rank() {
                spread(&mut f, dist.local_index(g), m.cube(g), x, fp, dc);
            }
        }
        reverse_exchange(&mut f, &plan, &ctx.ep)?;
        let mut cells = Vec::new();
        let mut partial = Vec::new();
        for (li, &g) in gids.iter().enumerate() {
            let dv = m.cube(g).cell_spacing.powi(3);
            let mut s = [0.0; 3];
            for idx in lay.interior() {
                let x = cell_center(m.cube(g), lay.coords(idx));
                let val: [f64; 3] = std::array::from_fn(|c| f.cubes[li][c * v + idx]);
                for c in 0..3 {
                    s[c] += val[c] * dv;
                }
                if val.iter().any(|&y| y != 0.0) {
                    cells.push((x.map(f64::to_bits), val));
                }
            }
            partial.push((g, s.to_vec()));
        }
        let sums = ctx.gather_by_cube_vec(&partial)?;
        let total: [f64; 3] = std::array::from_fn(|c| sums.iter().fold(0.0, |a, (_, s)| a + s[c]));
        Ok((cells, total))
    })
    .unwrap();
    let total = out[0].1;
    let mut cells: Vec<_> = out.into_iter().flat_map(|o| o.0).collect();
    cells.sort_by(|a, b| a.0.cmp(&b.0));
    (cells, total)
}

#[test]
fn face_crossing_spread_is_rank_independent_and_conservative() {
    let forces = [[1.0, 0.0, 0.0], [0.3, -0.7, 0.2], [-1.1, 0.4, 0.9], [0.0, 0.5, -0.25]];
    let dc = 3.0e-4;
    let eight = mesh(0.5, 8);
    let (one, total) = spread_cells(&eight, 1, &forces, dc);
    for ranks in [2, 4] {
        let (got, t) = spread_cells(&eight, ranks, &forces, dc);
        assert!(got == one, "P={ranks} differs from P=1");
        assert_eq!(t.map(f64::to_bits), total.map(f64::to_bits));
    }
    // zeroth moment: sum f dV = sum F dc
    for c in 0..3 {
        let expect: f64 = forces.iter().map(|f| f[c] * dc).sum();
        assert!((total[c] - expect).abs() <= 1e-15, "{c}: {} vs {expect}", total[c]);
    }
    // the single-cube mesh agrees cell by cell up to summation order
    let (single, _) = spread_cells(&mesh(1.0, 16), 1, &forces, dc);
    assert_eq!(single.len(), one.len());
    for (a, b) in single.iter().zip(&one) {
        assert_eq!(a.0, b.0);
        for c in 0..3 {
            assert!((a.1[c] - b.1[c]).abs() <= 1e-14 * a.1[c].abs().max(1.0));
        }
    }
}
