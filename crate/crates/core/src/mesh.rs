//! Building-cube mesh: a flat list of equal-cell-count cubes on a 2:1 graded
//! hierarchy, stored on an integer lattice at finest-level resolution.
//!
//! No tree is kept. Each cube knows its level, lattice base corner and
//! per-face neighbours; point location uses a hash lookup per level.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub type CubeId = usize;

/// Axis-aligned box in physical coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    /// Strict overlap: boxes sharing only a face do not overlap.
    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    /// Half-open containment, lower faces closed.
    pub fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] < self.max[a])
    }

    pub fn expanded(&self, d: f64) -> Aabb {
        Aabb {
            min: [self.min[0] - d, self.min[1] - d, self.min[2] - d],
            max: [self.max[0] + d, self.max[1] + d, self.max[2] + d],
        }
    }
}

/// What lies across one face of a cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceNeighbors {
    Boundary,
    Same(CubeId),
    Coarser(CubeId),
    /// Four finer cubes, ordered lexicographically by the two tangential axes
    /// (lower axis index varies fastest).
    Finer([CubeId; 4]),
}

impl FaceNeighbors {
    pub fn ids(&self) -> Vec<CubeId> {
        match *self {
            FaceNeighbors::Boundary => Vec::new(),
            FaceNeighbors::Same(c) | FaceNeighbors::Coarser(c) => vec![c],
            FaceNeighbors::Finer(f) => f.to_vec(),
        }
    }
}

/// Face index: `2 * axis + side`, side 0 = low, 1 = high.
pub fn face_index(axis: usize, high: bool) -> usize {
    2 * axis + high as usize
}

#[derive(Clone, Debug)]
pub struct Cube {
    pub global_id: CubeId,
    pub level: u8,
    /// Base corner in finest-cube lattice units.
    pub lattice: [u32; 3],
    pub base_corner: [f64; 3],
    pub edge_length: f64,
    /// Cell spacing, identical along all axes.
    pub cell_spacing: f64,
    pub faces: [FaceNeighbors; 6],
}

impl Cube {
    pub fn bounds(&self) -> Aabb {
        let e = self.edge_length;
        let b = self.base_corner;
        Aabb::new(b, [b[0] + e, b[1] + e, b[2] + e])
    }

    /// Cell spacing as a 3-vector.
    pub fn dx(&self) -> [f64; 3] {
        [self.cell_spacing; 3]
    }

    pub fn face_neighbor_ids(&self) -> Vec<CubeId> {
        let mut ids: Vec<CubeId> = self.faces.iter().flat_map(|f| f.ids()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Cell-center coordinate of cell `i` of `cube`; halo indices are allowed.
pub fn cell_center(cube: &Cube, i: [i64; 3]) -> [f64; 3] {
    let dx = cube.cell_spacing;
    let xc = cube.base_corner;
    [
        xc[0] + (i[0] as f64 + 0.5) * dx,
        xc[1] + (i[1] as f64 + 0.5) * dx,
        xc[2] + (i[2] as f64 + 0.5) * dx,
    ]
}

/// Explicit refinement request: every cube overlapping `region` is refined to
/// at least `level`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineRegion {
    pub region: Aabb,
    pub level: u8,
}

/// Refine every cube within `distance` of a triangulated surface.
#[derive(Clone, Debug)]
pub struct SurfaceRefine {
    pub triangles: Vec<[[f64; 3]; 3]>,
    pub distance: f64,
    pub level: u8,
}

#[derive(Clone, Debug)]
pub struct MeshSpec {
    pub domain: Aabb,
    /// Edge length of a level-0 cube; the domain must be an integer number of
    /// root cubes along every axis.
    pub root_edge: f64,
    pub n_cells_per_edge: usize,
    /// Number of levels the lattice is built for (`l_n`).
    pub n_levels: u8,
    pub refine: Vec<RefineRegion>,
    pub surface_refine: Vec<SurfaceRefine>,
}

impl MeshSpec {
    /// Single-level mesh tiling `domain` with root cubes.
    pub fn uniform(domain: Aabb, root_edge: f64, n_cells_per_edge: usize) -> Self {
        Self {
            domain,
            root_edge,
            n_cells_per_edge,
            n_levels: 1,
            refine: Vec::new(),
            surface_refine: Vec::new(),
        }
    }
}

pub const ALLOWED_CELLS_PER_EDGE: [usize; 3] = [4, 8, 16];
pub const MAX_LEVELS: u8 = 12;

type LeafKey = (u8, [u32; 3]);

#[derive(Clone, Debug)]
pub struct BcmMesh {
    cubes: Vec<Cube>,
    n_cells_per_edge: usize,
    n_levels: u8,
    bounding_box: Aabb,
    root_edge: f64,
    root_counts: [u32; 3],
    lookup: HashMap<LeafKey, CubeId>,
}

/// Per-level statistics for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshStats {
    pub cubes_per_level: Vec<usize>,
    pub total_cubes: usize,
    pub total_cells: usize,
    pub cells_per_cube: usize,
}

impl BcmMesh {
    pub fn cubes(&self) -> &[Cube] {
        &self.cubes
    }

    pub fn cube(&self, id: CubeId) -> &Cube {
        &self.cubes[id]
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn n_cells_per_edge(&self) -> usize {
        self.n_cells_per_edge
    }

    pub fn n_levels(&self) -> u8 {
        self.n_levels
    }

    pub fn refinement_ratio(&self) -> usize {
        2
    }

    pub fn bounding_box(&self) -> Aabb {
        self.bounding_box
    }

    pub fn root_edge(&self) -> f64 {
        self.root_edge
    }

    pub fn root_counts(&self) -> [u32; 3] {
        self.root_counts
    }

    /// Physical size of one finest-lattice unit (a finest-level cube edge).
    pub fn lattice_unit(&self) -> f64 {
        self.root_edge / f64::from(1u32 << (self.n_levels - 1))
    }

    /// Cube edge in lattice units at `level`.
    pub fn lattice_edge(&self, level: u8) -> u32 {
        1u32 << (self.n_levels - 1 - level)
    }

    /// Extent of the finest lattice along each axis.
    pub fn lattice_extent(&self) -> [u32; 3] {
        let s = self.lattice_edge(0);
        [
            self.root_counts[0] * s,
            self.root_counts[1] * s,
            self.root_counts[2] * s,
        ]
    }

    /// Identity: cubes are stored in Z-order, so global id = curve position.
    pub fn zorder(&self) -> Vec<CubeId> {
        (0..self.cubes.len()).collect()
    }

    /// Finest cube whose half-open extent contains `x`.
    pub fn locate_cube(&self, x: [f64; 3]) -> Option<CubeId> {
        if !self.bounding_box.contains(x) {
            return None;
        }
        let unit = self.lattice_unit();
        let ext = self.lattice_extent();
        let mut q = [0u32; 3];
        for a in 0..3 {
            let v = ((x[a] - self.bounding_box.min[a]) / unit).floor();
            q[a] = (v.max(0.0) as u32).min(ext[a] - 1);
        }
        self.locate_lattice(q)
    }

    /// Cube containing finest-lattice cell `q`.
    pub fn locate_lattice(&self, q: [u32; 3]) -> Option<CubeId> {
        for level in 0..self.n_levels {
            let shift = self.n_levels - 1 - level;
            let key = (level, [q[0] >> shift, q[1] >> shift, q[2] >> shift]);
            if let Some(&id) = self.lookup.get(&key) {
                return Some(id);
            }
        }
        None
    }

    pub fn stats(&self) -> MeshStats {
        let mut per_level = vec![0usize; self.n_levels as usize];
        for c in &self.cubes {
            per_level[c.level as usize] += 1;
        }
        let cells_per_cube = self.n_cells_per_edge.pow(3);
        MeshStats {
            cubes_per_level: per_level,
            total_cubes: self.cubes.len(),
            total_cells: self.cubes.len() * cells_per_cube,
            cells_per_cube,
        }
    }

    /// Leaf description `(level, lattice base corner)` for each cube in id order.
    pub fn leaves(&self) -> Vec<(u8, [u32; 3])> {
        self.cubes.iter().map(|c| (c.level, c.lattice)).collect()
    }

    /// Rebuild a mesh from its leaf list (as stored in checkpoints). An empty
    /// list gives an empty mesh, which only a header-only checkpoint uses.
    pub fn from_leaves(
        domain: Aabb,
        root_edge: f64,
        n_cells_per_edge: usize,
        n_levels: u8,
        leaves: &[(u8, [u32; 3])],
    ) -> Result<Self> {
        let root_counts = validate_spec(domain, root_edge, n_cells_per_edge, n_levels)?;
        let mut set = HashSet::with_capacity(leaves.len());
        for &(level, lattice) in leaves {
            if level >= n_levels {
                return Err(Error::Mesh(format!(
                    "leaf level {level} >= n_levels {n_levels}"
                )));
            }
            let s = 1u32 << (n_levels - 1 - level);
            if lattice.iter().any(|&v| v % s != 0) {
                return Err(Error::Mesh(format!(
                    "leaf {lattice:?} not aligned to level {level}"
                )));
            }
            set.insert((level, [lattice[0] / s, lattice[1] / s, lattice[2] / s]));
        }
        let mesh = assemble(
            domain,
            root_edge,
            n_cells_per_edge,
            n_levels,
            root_counts,
            &set,
        )?;
        if !leaves.is_empty() {
            mesh.check_coverage()?;
        }
        Ok(mesh)
    }

    /// Exact volume audit in lattice arithmetic.
    pub fn check_coverage(&self) -> Result<()> {
        let total: u128 = self
            .cubes
            .iter()
            .map(|c| u128::from(self.lattice_edge(c.level)).pow(3))
            .sum();
        let ext = self.lattice_extent();
        let expected = u128::from(ext[0]) * u128::from(ext[1]) * u128::from(ext[2]);
        if total != expected {
            return Err(Error::Mesh(format!(
                "cube volumes sum to {total} lattice cells, domain has {expected}"
            )));
        }
        Ok(())
    }
}

fn validate_spec(domain: Aabb, root_edge: f64, n_cells: usize, n_levels: u8) -> Result<[u32; 3]> {
    if !ALLOWED_CELLS_PER_EDGE.contains(&n_cells) {
        return Err(Error::Mesh(format!(
            "n_cells_per_edge must be one of {ALLOWED_CELLS_PER_EDGE:?}, got {n_cells}"
        )));
    }
    if n_levels == 0 || n_levels > MAX_LEVELS {
        return Err(Error::Mesh(format!("n_levels must be in 1..={MAX_LEVELS}")));
    }
    if !(root_edge > 0.0) {
        return Err(Error::Mesh("root edge must be positive".into()));
    }
    let mut counts = [0u32; 3];
    for a in 0..3 {
        let r = domain.extent()[a] / root_edge;
        let n = r.round();
        if n < 1.0 || (r - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::Mesh(format!(
                "domain extent along axis {a} is not a whole number of root cubes ({r})"
            )));
        }
        counts[a] = n as u32;
    }
    Ok(counts)
}

pub fn morton_key(p: [u32; 3]) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut x = u64::from(v) & 0x1f_ffff;
        x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
        x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
        x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
        x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
        x = (x | (x << 2)) & 0x1249_2492_4924_9249;
        x
    }
    spread(p[0]) | (spread(p[1]) << 1) | (spread(p[2]) << 2)
}

/// Permutation ordering cubes by the Morton key of their lattice base corner.
/// Entry `k` is the index (into `cubes`) of the k-th cube along the curve.
pub fn zorder_sort(cubes: &[Cube]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cubes.len()).collect();
    order.sort_by_key(|&i| morton_key(cubes[i].lattice));
    order
}

fn children(key: LeafKey) -> [LeafKey; 8] {
    let (l, c) = key;
    let mut out = [(0u8, [0u32; 3]); 8];
    for (n, slot) in out.iter_mut().enumerate() {
        let o = [n as u32 & 1, (n as u32 >> 1) & 1, (n as u32 >> 2) & 1];
        *slot = (l + 1, [2 * c[0] + o[0], 2 * c[1] + o[1], 2 * c[2] + o[2]]);
    }
    out
}

struct Lattice {
    n_levels: u8,
    ext: [u32; 3],
    unit: f64,
    origin: [f64; 3],
}

impl Lattice {
    fn edge(&self, level: u8) -> u32 {
        1u32 << (self.n_levels - 1 - level)
    }

    fn bounds(&self, key: LeafKey) -> Aabb {
        let s = self.edge(key.0);
        let e = f64::from(s) * self.unit;
        let mut min = [0.0; 3];
        for a in 0..3 {
            min[a] = self.origin[a] + f64::from(key.1[a] * s) * self.unit;
        }
        Aabb::new(min, [min[0] + e, min[1] + e, min[2] + e])
    }

    fn find(&self, leaves: &HashSet<LeafKey>, q: [u32; 3]) -> Option<LeafKey> {
        for level in 0..self.n_levels {
            let shift = self.n_levels - 1 - level;
            let key = (level, [q[0] >> shift, q[1] >> shift, q[2] >> shift]);
            if leaves.contains(&key) {
                return Some(key);
            }
        }
        None
    }

    /// Lattice cell just outside `key` in direction `dir` (each entry -1, 0, 1),
    /// taken at the centre of the touching face/edge/corner.
    fn probe(&self, key: LeafKey, dir: [i32; 3]) -> Option<[u32; 3]> {
        let s = i64::from(self.edge(key.0));
        let mut q = [0u32; 3];
        for a in 0..3 {
            // doubled coordinates keep the face centre integral
            let lo2 = 2 * i64::from(key.1[a]) * s;
            let c2 = lo2 + s;
            let p2 = c2 + i64::from(dir[a]) * (s + 1);
            let p = p2.div_euclid(2);
            if p < 0 || p >= i64::from(self.ext[a]) {
                return None;
            }
            q[a] = p as u32;
        }
        Some(q)
    }
}

const DIRS26: [[i32; 3]; 26] = {
    let mut out = [[0i32; 3]; 26];
    let mut n = 0;
    let mut k = -1;
    while k <= 1 {
        let mut j = -1;
        while j <= 1 {
            let mut i = -1;
            while i <= 1 {
                if !(i == 0 && j == 0 && k == 0) {
                    out[n] = [i, j, k];
                    n += 1;
                }
                i += 1;
            }
            j += 1;
        }
        k += 1;
    }
    out
};

/// Build a graded, Z-ordered mesh from a domain and refinement rules.
///
/// Grading is enforced across faces, edges and corners, so every cube
/// touching another differs from it by at most one level.
pub fn generate_mesh(spec: &MeshSpec) -> Result<BcmMesh> {
    let root_counts = validate_spec(
        spec.domain,
        spec.root_edge,
        spec.n_cells_per_edge,
        spec.n_levels,
    )?;
    for r in &spec.refine {
        if r.level >= spec.n_levels {
            return Err(Error::Mesh(format!(
                "refine level {} exceeds configured maximum {}",
                r.level,
                spec.n_levels - 1
            )));
        }
        if !r.region.overlaps(&spec.domain) {
            return Err(Error::Mesh(format!(
                "refine region {:?}..{:?} lies outside the domain",
                r.region.min, r.region.max
            )));
        }
    }
    let mut surface_boxes: Vec<(Aabb, u8)> = Vec::new();
    for s in &spec.surface_refine {
        if s.level >= spec.n_levels {
            return Err(Error::Mesh(format!(
                "surface refine level {} too deep",
                s.level
            )));
        }
        for t in &s.triangles {
            let mut min = t[0];
            let mut max = t[0];
            for v in &t[1..] {
                for a in 0..3 {
                    min[a] = min[a].min(v[a]);
                    max[a] = max[a].max(v[a]);
                }
            }
            surface_boxes.push((Aabb::new(min, max).expanded(s.distance.max(1e-12)), s.level));
        }
    }

    let lat = Lattice {
        n_levels: spec.n_levels,
        ext: [
            root_counts[0] << (spec.n_levels - 1),
            root_counts[1] << (spec.n_levels - 1),
            root_counts[2] << (spec.n_levels - 1),
        ],
        unit: spec.root_edge / f64::from(1u32 << (spec.n_levels - 1)),
        origin: spec.domain.min,
    };

    let mut leaves: HashSet<LeafKey> = HashSet::new();
    for k in 0..root_counts[2] {
        for j in 0..root_counts[1] {
            for i in 0..root_counts[0] {
                leaves.insert((0, [i, j, k]));
            }
        }
    }

    // explicit refinement, coarse to fine
    loop {
        let mut split: Vec<LeafKey> = leaves
            .iter()
            .copied()
            .filter(|&key| {
                let b = lat.bounds(key);
                spec.refine
                    .iter()
                    .any(|r| r.level > key.0 && r.region.overlaps(&b))
                    || surface_boxes
                        .iter()
                        .any(|(sb, l)| *l > key.0 && sb.overlaps(&b))
            })
            .collect();
        if split.is_empty() {
            break;
        }
        split.sort_unstable();
        for key in split {
            leaves.remove(&key);
            leaves.extend(children(key));
        }
    }

    // 2:1 grading, propagated outward
    loop {
        let mut split: HashSet<LeafKey> = HashSet::new();
        for &key in &leaves {
            if key.0 < 2 {
                continue;
            }
            for dir in DIRS26 {
                if let Some(q) = lat.probe(key, dir) {
                    if let Some(other) = lat.find(&leaves, q) {
                        if other.0 + 1 < key.0 {
                            split.insert(other);
                        }
                    }
                }
            }
        }
        if split.is_empty() {
            break;
        }
        let mut split: Vec<LeafKey> = split.into_iter().collect();
        split.sort_unstable();
        for key in split {
            leaves.remove(&key);
            leaves.extend(children(key));
        }
    }

    let mesh = assemble(
        spec.domain,
        spec.root_edge,
        spec.n_cells_per_edge,
        spec.n_levels,
        root_counts,
        &leaves,
    )?;
    mesh.check_coverage()?;
    Ok(mesh)
}

fn assemble(
    domain: Aabb,
    root_edge: f64,
    n_cells: usize,
    n_levels: u8,
    root_counts: [u32; 3],
    leaves: &HashSet<LeafKey>,
) -> Result<BcmMesh> {
    let unit = root_edge / f64::from(1u32 << (n_levels - 1));
    let mut cubes: Vec<Cube> = leaves
        .iter()
        .map(|&(level, c)| {
            let s = 1u32 << (n_levels - 1 - level);
            let lattice = [c[0] * s, c[1] * s, c[2] * s];
            let edge = f64::from(s) * unit;
            Cube {
                global_id: 0,
                level,
                lattice,
                base_corner: [
                    domain.min[0] + f64::from(lattice[0]) * unit,
                    domain.min[1] + f64::from(lattice[1]) * unit,
                    domain.min[2] + f64::from(lattice[2]) * unit,
                ],
                edge_length: edge,
                cell_spacing: edge / n_cells as f64,
                faces: [FaceNeighbors::Boundary; 6],
            }
        })
        .collect();
    let order = zorder_sort(&cubes);
    cubes = order.into_iter().map(|i| cubes[i].clone()).collect();
    let mut lookup = HashMap::with_capacity(cubes.len());
    for (id, c) in cubes.iter_mut().enumerate() {
        c.global_id = id;
        let s = 1u32 << (n_levels - 1 - c.level);
        lookup.insert(
            (
                c.level,
                [c.lattice[0] / s, c.lattice[1] / s, c.lattice[2] / s],
            ),
            id,
        );
    }
    let mut mesh = BcmMesh {
        cubes,
        n_cells_per_edge: n_cells,
        n_levels,
        bounding_box: domain,
        root_edge,
        root_counts,
        lookup,
    };
    let tables = build_adjacency(&mesh)?;
    for (c, faces) in mesh.cubes.iter_mut().zip(tables) {
        c.faces = faces;
    }
    Ok(mesh)
}

/// Per-face adjacency for every cube. Fails if two face-adjacent cubes
/// differ by more than one level.
pub fn build_adjacency(mesh: &BcmMesh) -> Result<Vec<[FaceNeighbors; 6]>> {
    let ext = mesh.lattice_extent();
    let mut out = Vec::with_capacity(mesh.len());
    for cube in mesh.cubes() {
        let s = i64::from(mesh.lattice_edge(cube.level));
        let mut faces = [FaceNeighbors::Boundary; 6];
        for axis in 0..3 {
            for high in [false, true] {
                let probe = |tangent_offsets: [i64; 3]| -> Option<[u32; 3]> {
                    // doubled lattice coordinates
                    let mut q = [0u32; 3];
                    for a in 0..3 {
                        let lo2 = 2 * i64::from(cube.lattice[a]);
                        let p2 = if a == axis {
                            if high {
                                lo2 + 2 * s + 1
                            } else {
                                lo2 - 1
                            }
                        } else {
                            lo2 + tangent_offsets[a]
                        };
                        let p = p2.div_euclid(2);
                        if p < 0 || p >= i64::from(ext[a]) {
                            return None;
                        }
                        q[a] = p as u32;
                    }
                    Some(q)
                };
                let centre = [s, s, s];
                let Some(q) = probe(centre) else {
                    continue;
                };
                let other = mesh
                    .locate_lattice(q)
                    .ok_or_else(|| Error::Mesh(format!("hole in mesh at lattice {q:?}")))?;
                let ol = mesh.cube(other).level;
                let f = if ol == cube.level {
                    FaceNeighbors::Same(other)
                } else if ol + 1 == cube.level {
                    FaceNeighbors::Coarser(other)
                } else if ol == cube.level + 1 {
                    let (t1, t2) = match axis {
                        0 => (1, 2),
                        1 => (0, 2),
                        _ => (0, 1),
                    };
                    let mut ids = [0usize; 4];
                    for (n, id) in ids.iter_mut().enumerate() {
                        let mut off = [0i64; 3];
                        off[t1] = if n & 1 == 0 { s / 2 } else { 3 * s / 2 };
                        off[t2] = if n & 2 == 0 { s / 2 } else { 3 * s / 2 };
                        let q = probe(off).expect("tangential probe inside domain");
                        *id = mesh
                            .locate_lattice(q)
                            .ok_or_else(|| Error::Mesh(format!("hole in mesh at lattice {q:?}")))?;
                    }
                    FaceNeighbors::Finer(ids)
                } else {
                    let (fine, coarse) = if ol > cube.level {
                        (other, cube.global_id)
                    } else {
                        (cube.global_id, other)
                    };
                    return Err(Error::Grading {
                        fine,
                        fine_level: mesh.cube(fine).level,
                        coarse,
                        coarse_level: mesh.cube(coarse).level,
                    });
                };
                faces[face_index(axis, high)] = f;
            }
        }
        out.push(faces);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> Aabb {
        Aabb::new([0.0; 3], [1.0; 3])
    }

    #[test]
    fn single_cube_mesh() {
        let m = generate_mesh(&MeshSpec::uniform(unit_box(), 1.0, 4)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.cube(0).level, 0);
        assert!(m
            .cube(0)
            .faces
            .iter()
            .all(|f| *f == FaceNeighbors::Boundary));
        assert_eq!(m.locate_cube([0.5; 3]), Some(0));
        assert_eq!(m.zorder(), vec![0]);
    }

    #[test]
    fn cell_center_examples() {
        let mut c = Cube {
            global_id: 0,
            level: 0,
            lattice: [0; 3],
            base_corner: [0.0; 3],
            edge_length: 4.0,
            cell_spacing: 1.0,
            faces: [FaceNeighbors::Boundary; 6],
        };
        assert_eq!(cell_center(&c, [0, 0, 0]), [0.5, 0.5, 0.5]);
        assert_eq!(cell_center(&c, [-1, 0, 0]), [-0.5, 0.5, 0.5]);
        c.base_corner = [2.0, 0.0, 0.0];
        c.cell_spacing = 0.5;
        assert_eq!(cell_center(&c, [1, 0, 0]), [2.75, 0.25, 0.25]);
    }

    #[test]
    fn morton_order_2x2x1() {
        let m = generate_mesh(&MeshSpec::uniform(
            Aabb::new([0.0; 3], [2.0, 2.0, 1.0]),
            1.0,
            4,
        ))
        .unwrap();
        let corners: Vec<[u32; 3]> = m.cubes().iter().map(|c| c.lattice).collect();
        assert_eq!(corners, vec![[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
    }

    #[test]
    fn zorder_locality_on_uniform_grid() {
        let m = generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [4.0; 3]), 1.0, 4)).unwrap();
        assert_eq!(m.len(), 64);
        // consecutive ids adjacent by face or edge (share >= 2 coordinates, differ by 1)
        let mut adjacent = 0;
        for w in m.cubes().windows(2) {
            let d: Vec<i64> = (0..3)
                .map(|a| (i64::from(w[0].lattice[a]) - i64::from(w[1].lattice[a])).abs())
                .collect();
            let face = d.iter().filter(|&&v| v == 1).count() == 1 && d.iter().all(|&v| v <= 1);
            let edge = d.iter().filter(|&&v| v == 1).count() == 2 && d.iter().all(|&v| v <= 1);
            if face || edge {
                adjacent += 1;
            }
        }
        assert!(
            adjacent as f64 >= 0.75 * 63.0,
            "only {adjacent} of 63 steps adjacent"
        );
    }

    #[test]
    fn refine_central_eighth_graded() {
        let spec = MeshSpec {
            domain: unit_box(),
            root_edge: 1.0,
            n_cells_per_edge: 4,
            n_levels: 3,
            refine: vec![RefineRegion {
                region: Aabb::new([0.375; 3], [0.625; 3]),
                level: 2,
            }],
            surface_refine: vec![],
        };
        let m = generate_mesh(&spec).unwrap();
        for c in m.cubes() {
            for id in c.face_neighbor_ids() {
                let d = i32::from(c.level) - i32::from(m.cube(id).level);
                assert!(d.abs() <= 1);
            }
        }
        assert!(m.cubes().iter().any(|c| c.level == 2));
        m.check_coverage().unwrap();
    }

    /// 1D analogue of grading propagation: a level-`L` cell next to a level-0
    /// region forces intermediate levels in between.
    fn graded_1d(target: u32) -> Vec<u32> {
        // cells described by level, covering [0, 1); refine the first cell repeatedly
        let mut cells: Vec<(u32, u64)> = vec![(0, 0)];
        for _ in 0..target {
            let (l, i) = cells[0];
            cells.remove(0);
            cells.insert(0, (l + 1, 2 * i + 1));
            cells.insert(0, (l + 1, 2 * i));
        }
        loop {
            let mut changed = false;
            for k in 0..cells.len() - 1 {
                let (a, b) = (cells[k].0, cells[k + 1].0);
                if a > b + 1 {
                    let (l, i) = cells[k + 1];
                    cells.remove(k + 1);
                    cells.insert(k + 1, (l + 1, 2 * i + 1));
                    cells.insert(k + 1, (l + 1, 2 * i));
                    changed = true;
                    break;
                }
            }
            if !changed {
                break;
            }
        }
        let mut levels: Vec<u32> = cells.iter().map(|c| c.0).collect();
        levels.sort_unstable();
        levels.dedup();
        levels
    }

    #[test]
    fn grading_inserts_intermediate_levels() {
        assert_eq!(graded_1d(3), vec![1, 2, 3]);
        let spec = MeshSpec {
            domain: Aabb::new([0.0; 3], [4.0, 1.0, 1.0]),
            root_edge: 1.0,
            n_cells_per_edge: 4,
            n_levels: 4,
            refine: vec![RefineRegion {
                region: Aabb::new([0.0; 3], [0.125; 3]),
                level: 3,
            }],
            surface_refine: vec![],
        };
        let m = generate_mesh(&spec).unwrap();
        let mut levels: Vec<u8> = m.cubes().iter().map(|c| c.level).collect();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn refine_outside_domain_rejected() {
        let mut spec = MeshSpec::uniform(unit_box(), 1.0, 4);
        spec.n_levels = 2;
        spec.refine.push(RefineRegion {
            region: Aabb::new([2.0; 3], [3.0; 3]),
            level: 1,
        });
        assert!(matches!(generate_mesh(&spec), Err(Error::Mesh(_))));
        spec.refine[0] = RefineRegion {
            region: unit_box(),
            level: 5,
        };
        assert!(matches!(generate_mesh(&spec), Err(Error::Mesh(_))));
    }

    #[test]
    fn adjacency_same_and_finer() {
        let m = generate_mesh(&MeshSpec::uniform(
            Aabb::new([0.0; 3], [2.0, 1.0, 1.0]),
            1.0,
            4,
        ))
        .unwrap();
        assert_eq!(m.cube(0).faces[face_index(0, true)], FaceNeighbors::Same(1));
        assert_eq!(
            m.cube(1).faces[face_index(0, false)],
            FaceNeighbors::Same(0)
        );
        assert_eq!(
            m.cube(0).faces[face_index(0, false)],
            FaceNeighbors::Boundary
        );

        let spec = MeshSpec {
            domain: Aabb::new([0.0; 3], [2.0, 1.0, 1.0]),
            root_edge: 1.0,
            n_cells_per_edge: 4,
            n_levels: 2,
            refine: vec![RefineRegion {
                region: Aabb::new([1.0, 0.0, 0.0], [2.0, 1.0, 1.0]),
                level: 1,
            }],
            surface_refine: vec![],
        };
        let m = generate_mesh(&spec).unwrap();
        let coarse = m.cubes().iter().find(|c| c.level == 0).unwrap();
        match coarse.faces[face_index(0, true)] {
            FaceNeighbors::Finer(ids) => {
                for id in ids {
                    assert_eq!(m.cube(id).level, 1);
                    assert_eq!(
                        m.cube(id).faces[face_index(0, false)],
                        FaceNeighbors::Coarser(coarse.global_id)
                    );
                }
            }
            other => panic!("expected finer neighbours, got {other:?}"),
        }
    }

    #[test]
    fn locate_lower_closed() {
        let m = generate_mesh(&MeshSpec::uniform(
            Aabb::new([0.0; 3], [2.0, 1.0, 1.0]),
            1.0,
            4,
        ))
        .unwrap();
        assert_eq!(m.locate_cube([1.0, 0.5, 0.5]), Some(1));
        assert_eq!(m.locate_cube([0.999, 0.5, 0.5]), Some(0));
        assert_eq!(m.locate_cube([2.0, 0.5, 0.5]), None);
        assert_eq!(m.locate_cube([-0.1, 0.5, 0.5]), None);
    }

    #[test]
    fn from_leaves_roundtrip() {
        let spec = MeshSpec {
            domain: unit_box(),
            root_edge: 0.5,
            n_cells_per_edge: 8,
            n_levels: 3,
            refine: vec![RefineRegion {
                region: Aabb::new([0.1; 3], [0.2; 3]),
                level: 2,
            }],
            surface_refine: vec![],
        };
        let m = generate_mesh(&spec).unwrap();
        let r = BcmMesh::from_leaves(unit_box(), 0.5, 8, 3, &m.leaves()).unwrap();
        assert_eq!(r.leaves(), m.leaves());
        assert_eq!(
            r.cubes().iter().map(|c| c.faces).collect::<Vec<_>>(),
            m.cubes().iter().map(|c| c.faces).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bad_cells_per_edge() {
        assert!(generate_mesh(&MeshSpec::uniform(unit_box(), 1.0, 5)).is_err());
        assert!(generate_mesh(&MeshSpec::uniform(unit_box(), 0.3, 4)).is_err());
    }
}
