//! Per-cube stencil kernels on cell-centred arrays with halo layers. Each
//! writes interior cells only; inputs must have valid halos.

use crate::field::Layout;

/// QUICK face value from the upwind-upwind, upwind and downwind cells.
#[inline]
pub fn quick(uu: f64, u: f64, d: f64) -> f64 {
    0.75 * u + 0.375 * d - 0.125 * uu
}

#[inline]
fn for_interior(lay: Layout, mut f: impl FnMut(usize)) {
    let n = lay.cells as i64;
    for k in 0..n {
        for j in 0..n {
            let base = lay.index(0, j, k);
            for i in 0..n as usize {
                f(base + i);
            }
        }
    }
}

/// Convective flux `U_face * phi_face` through the face between `i` and
/// `i + s`, with `vel` the normal velocity component array.
#[inline]
fn face_flux(vel: &[f64], phi: &[f64], i: usize, s: usize) -> f64 {
    let uf = 0.5 * (vel[i] + vel[i + s]);
    let pf = if uf >= 0.0 {
        quick(phi[i - s], phi[i], phi[i + s])
    } else {
        quick(phi[i + 2 * s], phi[i + s], phi[i])
    };
    uf * pf
}

/// `-A[u] + nu D[u]` for all three components. `u` and `out` hold three
/// component blocks of `lay.volume()` values.
pub fn momentum_rhs(u: &[f64], lay: Layout, dx: f64, nu: f64, convection: bool, out: &mut [f64]) {
    let v = lay.volume();
    let st = [lay.stride(0), lay.stride(1), lay.stride(2)];
    let inv_dx = 1.0 / dx;
    let inv_dx2 = inv_dx * inv_dx;
    for c in 0..3 {
        let phi = &u[c * v..(c + 1) * v];
        let o = &mut out[c * v..(c + 1) * v];
        for_interior(lay, |i| {
            let mut conv = 0.0;
            if convection {
                for a in 0..3 {
                    let vel = &u[a * v..(a + 1) * v];
                    let s = st[a];
                    conv += face_flux(vel, phi, i, s) - face_flux(vel, phi, i - s, s);
                }
            }
            let lap = phi[i + st[0]]
                + phi[i - st[0]]
                + phi[i + st[1]]
                + phi[i - st[1]]
                + phi[i + st[2]]
                + phi[i - st[2]]
                - 6.0 * phi[i];
            o[i] = -conv * inv_dx + nu * lap * inv_dx2;
        });
    }
}

/// Seven-point Laplacian of a scalar.
pub fn laplacian(p: &[f64], lay: Layout, dx: f64, out: &mut [f64]) {
    let st = [lay.stride(0), lay.stride(1), lay.stride(2)];
    let inv = 1.0 / (dx * dx);
    for_interior(lay, |i| {
        out[i] = (p[i + st[0]]
            + p[i - st[0]]
            + p[i + st[1]]
            + p[i - st[1]]
            + p[i + st[2]]
            + p[i - st[2]]
            - 6.0 * p[i])
            * inv;
    });
}

/// Divergence of the arithmetic-mean face velocities.
pub fn divergence(u: &[f64], lay: Layout, dx: f64, out: &mut [f64]) {
    let v = lay.volume();
    let st = [lay.stride(0), lay.stride(1), lay.stride(2)];
    let h = 0.5 / dx;
    for_interior(lay, |i| {
        let mut d = 0.0;
        for a in 0..3 {
            let ua = &u[a * v..(a + 1) * v];
            d += ua[i + st[a]] - ua[i - st[a]];
        }
        out[i] = d * h;
    });
}

/// Central cell gradient `(p[i+1] - p[i-1]) / (2 dx)` into three blocks.
pub fn gradient(p: &[f64], lay: Layout, dx: f64, out: &mut [f64]) {
    let v = lay.volume();
    let h = 0.5 / dx;
    for a in 0..3 {
        let s = lay.stride(a);
        let o = &mut out[a * v..(a + 1) * v];
        for_interior(lay, |i| o[i] = (p[i + s] - p[i - s]) * h);
    }
}

/// Divergence of the momentum-interpolated (Rhie-Chow) face velocity
/// `avg(u) - k [(p_R - p_L)/dx - (G p_L + G p_R)/2]` with `k = dt/rho`.
/// Needs two halo layers of `p`.
pub fn divergence_rhie_chow(u: &[f64], p: &[f64], lay: Layout, dx: f64, k: f64, out: &mut [f64]) {
    let v = lay.volume();
    let st = [lay.stride(0), lay.stride(1), lay.stride(2)];
    let inv = 1.0 / dx;
    let face = |ua: &[f64], i: usize, s: usize| {
        let gl = (p[i + s] - p[i - s]) * 0.5 * inv;
        let gr = (p[i + 2 * s] - p[i]) * 0.5 * inv;
        0.5 * (ua[i] + ua[i + s]) - k * ((p[i + s] - p[i]) * inv - 0.5 * (gl + gr))
    };
    for_interior(lay, |i| {
        let mut d = 0.0;
        for a in 0..3 {
            let ua = &u[a * v..(a + 1) * v];
            let s = st[a];
            d += face(ua, i, s) - face(ua, i - s, s);
        }
        out[i] = d * inv;
    });
}

/// Interior offsets of a layout in i-fastest order.
pub fn interior_offsets(lay: Layout) -> Vec<usize> {
    let mut v = Vec::with_capacity(lay.cells.pow(3));
    for_interior(lay, |i| v.push(i));
    v
}
