use std::f64::consts::PI;

use cubelet::lagrangian::{discretize_surface, RigidBody};
use cubelet::mesh::{generate_mesh, Aabb, MeshSpec};

/// Number of cells of spacing `dx` on the lattice starting at `lo` whose box
/// meets the sphere surface of radius `r` around `c`.
fn straddling_cells(lo: f64, n: usize, dx: f64, c: [f64; 3], r: f64) -> usize {
    let mut count = 0;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let (mut near, mut far) = (0.0, 0.0);
                for (a, q) in [i, j, k].into_iter().enumerate() {
                    let (x0, x1) = (lo + q as f64 * dx, lo + (q + 1) as f64 * dx);
                    let d0 = (x0 - c[a]).abs();
                    let d1 = (x1 - c[a]).abs();
                    let closest = if (x0..=x1).contains(&c[a]) { 0.0 } else { d0.min(d1) };
                    near += closest * closest;
                    far += d0.max(d1).powi(2);
                }
                if near.sqrt() < r && r < far.sqrt() {
                    count += 1;
                }
            }
        }
    }
    count
}

/// One particle per cut cell: a plane with unit normal `n` cuts
/// `(|nx| + |ny| + |nz|) / dx^2` cells per unit area, which averages to
/// `1.5 / dx^2` over a sphere.
#[test]
fn sphere_particle_count() {
    let d = 1.0;
    let dx = d / 20.0;
    let mesh = generate_mesh(&MeshSpec::uniform(Aabb::new([-1.2; 3], [1.2; 3]), 0.4, 8)).unwrap();
    let c = [0.013, -0.007, 0.004];
    let body = RigidBody::sphere(0, c, 0.5 * d, 5);
    let ps = discretize_surface(&body, &mesh, 0).unwrap();
    let n = ps.len() as f64;
    let area_estimate = 1.5 * PI * d * d / (dx * dx);
    let brute = straddling_cells(-1.2, 48, dx, c, 0.5 * d) as f64;
    println!("{n} particles, crossing estimate {area_estimate:.0}, straddling cells {brute}, pi D^2/dx^2 {:.0}", PI * d * d / (dx * dx));
    assert!((n / area_estimate - 1.0).abs() <= 0.2);
    assert!((n / brute - 1.0).abs() <= 0.05);
    // the ids are dense and the weights integrate the surface area
    let mut ids: Vec<u64> = ps.iter().map(|p| p.global_id).collect();
    ids.sort_unstable();
    assert!(ids.iter().enumerate().all(|(i, &id)| id == i as u64));
    let dc: f64 = ps.iter().map(|p| p.dc_volume).sum();
    assert!((dc / dx - body.surface_area()).abs() <= 1e-12 * body.surface_area());
}
