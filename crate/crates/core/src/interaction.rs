//! Three-point discrete delta kernel linking particles and cell values.

use crate::field::Field;
use crate::mesh::Cube;

/// One-dimensional three-point kernel, `r` in units of the cell spacing.
#[inline]
pub fn delta1(r: f64) -> f64 {
    let a = r.abs();
    if a <= 0.5 {
        0.75 - a * a
    } else if a <= 1.5 {
        0.5 * (2.25 - 3.0 * a + a * a)
    } else {
        0.0
    }
}

/// Tensor-product delta `prod phi(d_n / dx) / dx` with dimension 1/length^3.
#[inline]
pub fn delta3(d: [f64; 3], dx: f64) -> f64 {
    delta1(d[0] / dx) * delta1(d[1] / dx) * delta1(d[2] / dx) / (dx * dx * dx)
}

/// Stencil start index and per-axis weights `phi` for the 3 cells around `x`.
/// Indices are cube-local and may reach one cell into the halo.
#[inline]
pub fn stencil(cube: &Cube, x: [f64; 3]) -> ([i64; 3], [[f64; 3]; 3]) {
    let dx = cube.cell_spacing;
    let mut base = [0i64; 3];
    let mut w = [[0.0; 3]; 3];
    for a in 0..3 {
        let s = (x[a] - cube.base_corner[a]) / dx - 0.5;
        let b = (s + 0.5).floor() as i64 - 1;
        base[a] = b;
        for m in 0..3 {
            w[a][m] = delta1(s - (b + m as i64) as f64);
        }
    }
    (base, w)
}

/// Kernel-weighted value of each component of `field` at `x`, which must lie
/// in cube `local` (the halo supplies the outer stencil points).
pub fn interpolate(field: &Field, local: usize, cube: &Cube, x: [f64; 3], out: &mut [f64]) {
    let (b, w) = stencil(cube, x);
    let lay = field.layout;
    for (c, o) in out.iter_mut().enumerate().take(field.ncomp) {
        let arr = field.comp(local, c);
        let mut acc = 0.0;
        for k in 0..3 {
            for j in 0..3 {
                let wjk = w[1][j] * w[2][k];
                for i in 0..3 {
                    acc += w[0][i]
                        * wjk
                        * arr[lay.index(b[0] + i as i64, b[1] + j as i64, b[2] + k as i64)];
                }
            }
        }
        *o = acc;
    }
}

/// Spread `value * weight * delta` onto the stencil cells around `x`, halo
/// cells included; halo contributions are returned to owners by a reverse
/// exchange.
pub fn spread(
    field: &mut Field,
    local: usize,
    cube: &Cube,
    x: [f64; 3],
    value: &[f64],
    weight: f64,
) {
    let (b, w) = stencil(cube, x);
    let lay = field.layout;
    let dx = cube.cell_spacing;
    let scale = weight / (dx * dx * dx);
    for (c, &v) in value.iter().enumerate().take(field.ncomp) {
        let arr = field.comp_mut(local, c);
        for k in 0..3 {
            for j in 0..3 {
                let wjk = w[1][j] * w[2][k];
                for i in 0..3 {
                    arr[lay.index(b[0] + i as i64, b[1] + j as i64, b[2] + k as i64)] +=
                        v * scale * w[0][i] * wjk;
                }
            }
        }
    }
}
