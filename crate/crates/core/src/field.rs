//! Per-cube cell-centred arrays with halo layers.

/// Shape of one cube's array: `cells` interior cells per edge plus `halo`
/// ghost layers on every side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub cells: usize,
    pub halo: usize,
}

impl Layout {
    pub const fn new(cells: usize, halo: usize) -> Self {
        Self { cells, halo }
    }

    /// Points per edge including halos.
    #[inline]
    pub fn side(&self) -> usize {
        self.cells + 2 * self.halo
    }

    #[inline]
    pub fn volume(&self) -> usize {
        let s = self.side();
        s * s * s
    }

    /// Linear offset of cell `(i, j, k)`; halo indices are negative or >= cells.
    #[inline]
    pub fn index(&self, i: i64, j: i64, k: i64) -> usize {
        let h = self.halo as i64;
        let s = self.side() as i64;
        debug_assert!(i >= -h && i < s - h && j >= -h && j < s - h && k >= -h && k < s - h);
        (((k + h) * s + (j + h)) * s + (i + h)) as usize
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [i64; 3] {
        let s = self.side();
        let h = self.halo as i64;
        [
            (idx % s) as i64 - h,
            ((idx / s) % s) as i64 - h,
            (idx / (s * s)) as i64 - h,
        ]
    }

    #[inline]
    pub fn is_interior(&self, c: [i64; 3]) -> bool {
        let n = self.cells as i64;
        c.iter().all(|&v| v >= 0 && v < n)
    }

    /// Linear stride along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        let s = self.side();
        match axis {
            0 => 1,
            1 => s,
            _ => s * s,
        }
    }

    /// Iterator over interior linear offsets in lexicographic (i fastest) order.
    pub fn interior(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.cells as i64;
        (0..n).flat_map(move |k| (0..n).flat_map(move |j| (0..n).map(move |i| self.index(i, j, k))))
    }

    /// Iterator over halo linear offsets in lexicographic order.
    pub fn halo_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.volume()).filter(move |&idx| !self.is_interior(self.coords(idx)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quantity {
    Velocity,
    Pressure,
    Force,
    Scratch,
}

impl Quantity {
    pub fn name(&self) -> &'static str {
        match self {
            Quantity::Velocity => "velocity",
            Quantity::Pressure => "pressure",
            Quantity::Force => "force",
            Quantity::Scratch => "scratch",
        }
    }

    /// Small integer folded into transport tags.
    pub fn tag_id(&self) -> u64 {
        match self {
            Quantity::Velocity => 1,
            Quantity::Pressure => 2,
            Quantity::Force => 3,
            Quantity::Scratch => 4,
        }
    }
}

/// One physical quantity over the cubes owned by a rank. Each cube array
/// holds `ncomp` consecutive component blocks of `layout.volume()` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub quantity: Quantity,
    pub ncomp: usize,
    pub layout: Layout,
    pub cubes: Vec<Vec<f64>>,
    /// Token of an exchange begun but not yet finalized.
    pub(crate) in_flight: Option<u64>,
}

impl Field {
    pub fn new(quantity: Quantity, ncomp: usize, layout: Layout, n_local: usize) -> Self {
        Self {
            quantity,
            ncomp,
            layout,
            cubes: vec![vec![0.0; ncomp * layout.volume()]; n_local],
            in_flight: None,
        }
    }

    #[inline]
    pub fn comp(&self, cube: usize, c: usize) -> &[f64] {
        let v = self.layout.volume();
        &self.cubes[cube][c * v..(c + 1) * v]
    }

    #[inline]
    pub fn comp_mut(&mut self, cube: usize, c: usize) -> &mut [f64] {
        let v = self.layout.volume();
        &mut self.cubes[cube][c * v..(c + 1) * v]
    }

    pub fn fill(&mut self, value: f64) {
        for a in &mut self.cubes {
            a.iter_mut().for_each(|x| *x = value);
        }
    }

    /// Zero every halo cell, keeping interiors.
    pub fn zero_halos(&mut self) {
        let lay = self.layout;
        let halo: Vec<usize> = lay.halo_cells().collect();
        let v = lay.volume();
        for a in &mut self.cubes {
            for c in 0..self.ncomp {
                for &h in &halo {
                    a[c * v + h] = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let lay = Layout::new(4, 2);
        assert_eq!(lay.side(), 8);
        for idx in 0..lay.volume() {
            let c = lay.coords(idx);
            assert_eq!(lay.index(c[0], c[1], c[2]), idx);
        }
        assert_eq!(lay.interior().count(), 64);
        assert_eq!(lay.halo_cells().count(), 512 - 64);
        assert_eq!(lay.index(0, 0, 0), (2 * 8 + 2) * 8 + 2);
    }
}
