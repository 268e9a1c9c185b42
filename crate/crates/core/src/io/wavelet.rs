//! Single-level separable CDF 5/3 lifting on cube arrays, in place with
//! approximation coefficients at even and details at odd positions along
//! each axis. Symmetric extension at both ends; line length must be even.

fn lines(side: usize, axis: usize) -> impl Iterator<Item = (usize, usize)> {
    let stride = [1, side, side * side][axis];
    let (sa, sb) = match axis {
        0 => (side, side * side),
        1 => (1, side * side),
        _ => (1, side),
    };
    (0..side).flat_map(move |b| (0..side).map(move |a| (a * sa + b * sb, stride)))
}

fn gather<T: Copy>(data: &[T], start: usize, stride: usize, buf: &mut [T]) {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = data[start + i * stride];
    }
}

fn scatter<T: Copy>(data: &mut [T], start: usize, stride: usize, buf: &[T]) {
    for (i, b) in buf.iter().enumerate() {
        data[start + i * stride] = *b;
    }
}

fn forward_line(x: &mut [f64]) {
    let n = x.len();
    for i in (1..n).step_by(2) {
        let r = if i + 1 < n { x[i + 1] } else { x[i - 1] };
        x[i] -= 0.5 * (x[i - 1] + r);
    }
    for i in (0..n).step_by(2) {
        let l = if i > 0 { x[i - 1] } else { x[i + 1] };
        x[i] += 0.25 * (l + x[i + 1]);
    }
}

fn inverse_line(x: &mut [f64]) {
    let n = x.len();
    for i in (0..n).step_by(2) {
        let l = if i > 0 { x[i - 1] } else { x[i + 1] };
        x[i] -= 0.25 * (l + x[i + 1]);
    }
    for i in (1..n).step_by(2) {
        let r = if i + 1 < n { x[i + 1] } else { x[i - 1] };
        x[i] += 0.5 * (x[i - 1] + r);
    }
}

#[inline]
fn floor_avg2(a: i64, b: i64) -> i64 {
    ((a as i128 + b as i128) >> 1) as i64
}

#[inline]
fn floor_quarter(a: i64, b: i64) -> i64 {
    ((a as i128 + b as i128 + 2) >> 2) as i64
}

// integer lifting with wrapping steps: the inverse recomputes the same
// rounded terms, so the round trip is exact for any input
fn forward_line_int(x: &mut [i64]) {
    let n = x.len();
    for i in (1..n).step_by(2) {
        let r = if i + 1 < n { x[i + 1] } else { x[i - 1] };
        x[i] = x[i].wrapping_sub(floor_avg2(x[i - 1], r));
    }
    for i in (0..n).step_by(2) {
        let l = if i > 0 { x[i - 1] } else { x[i + 1] };
        x[i] = x[i].wrapping_add(floor_quarter(l, x[i + 1]));
    }
}

fn inverse_line_int(x: &mut [i64]) {
    let n = x.len();
    for i in (0..n).step_by(2) {
        let l = if i > 0 { x[i - 1] } else { x[i + 1] };
        x[i] = x[i].wrapping_sub(floor_quarter(l, x[i + 1]));
    }
    for i in (1..n).step_by(2) {
        let r = if i + 1 < n { x[i + 1] } else { x[i - 1] };
        x[i] = x[i].wrapping_add(floor_avg2(x[i - 1], r));
    }
}

fn apply<T: Copy + Default>(data: &mut [T], side: usize, axes: [usize; 3], f: fn(&mut [T])) {
    assert_eq!(data.len(), side * side * side);
    assert!(
        side >= 2 && side.is_multiple_of(2),
        "cube side must be even"
    );
    let mut buf = vec![T::default(); side];
    for axis in axes {
        for (start, stride) in lines(side, axis) {
            gather(data, start, stride, &mut buf);
            f(&mut buf);
            scatter(data, start, stride, &buf);
        }
    }
}

pub fn forward(data: &mut [f64], side: usize) {
    apply(data, side, [0, 1, 2], forward_line);
}

pub fn inverse(data: &mut [f64], side: usize) {
    apply(data, side, [2, 1, 0], inverse_line);
}

pub fn forward_int(data: &mut [i64], side: usize) {
    apply(data, side, [0, 1, 2], forward_line_int);
}

pub fn inverse_int(data: &mut [i64], side: usize) {
    apply(data, side, [2, 1, 0], inverse_line_int);
}

/// True for approximation (all-even) coefficient positions.
#[inline]
pub fn is_approximation(idx: usize, side: usize) -> bool {
    let (i, j, k) = (idx % side, (idx / side) % side, idx / (side * side));
    i % 2 == 0 && j % 2 == 0 && k % 2 == 0
}

/// Worst-case reconstruction error per unit error in the detail
/// coefficients: `max_x sum_c |synthesis response of c at x|` over detail
/// positions `c`. The transform is separable, so the sum factors into 1D
/// low and high response sums.
pub fn detail_amplification(side: usize) -> f64 {
    let mut low = vec![0.0; side];
    let mut high = vec![0.0; side];
    for c in 0..side {
        let mut e = vec![0.0; side];
        e[c] = 1.0;
        inverse_line(&mut e);
        let acc = if c % 2 == 0 { &mut low } else { &mut high };
        for (a, v) in acc.iter_mut().zip(&e) {
            *a += v.abs();
        }
    }
    let mut worst = 0.0f64;
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let all: f64 = [x, y, z].iter().map(|&p| low[p] + high[p]).product();
                let approx: f64 = [x, y, z].iter().map(|&p| low[p]).product();
                worst = worst.max(all - approx);
            }
        }
    }
    worst
}

/// Amplification bound used to pick the quantisation step: the interior
/// value `(1 + 1)^3 - 1`; boundary rows amplify less.
pub const DETAIL_AMPLIFICATION: f64 = 7.0;
