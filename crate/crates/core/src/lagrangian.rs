//! Immersed bodies as Lagrangian surface particles grouped into per-cube
//! hash sets keyed by a globally unique id.

use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasherDefault, Hasher};
use std::path::Path;

use crate::decomp::Distribution;
use crate::error::{Error, Result};
use crate::mesh::{Aabb, BcmMesh, CubeId};
use crate::transport::{make_tag, tag_kind, Endpoint, RankId};

/// Multiplicative (Fibonacci) hashing of integer keys.
#[derive(Default, Clone, Copy)]
pub struct FibonacciHasher(u64);

impl Hasher for FibonacciHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0.rotate_left(8) ^ u64::from(b)).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
}

pub type FibonacciBuild = BuildHasherDefault<FibonacciHasher>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub global_id: u64,
    pub x: [f64; 3],
    /// Quadrature weight used by the projection sum (length^3).
    pub dc_volume: f64,
    pub body_id: u32,
}

impl Particle {
    pub fn new(global_id: u64, x: [f64; 3], dc_volume: f64, body_id: u32) -> Self {
        Self {
            global_id,
            x,
            dc_volume,
            body_id,
        }
    }

    pub const WIRE_BYTES: usize = 8 + 24 + 8 + 4;

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.global_id.to_le_bytes());
        for v in self.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.dc_volume.to_le_bytes());
        out.extend_from_slice(&self.body_id.to_le_bytes());
    }

    pub fn read_from(b: &[u8]) -> Self {
        let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        Self {
            global_id: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            x: [f(8), f(16), f(24)],
            dc_volume: f(32),
            body_id: u32::from_le_bytes(b[40..44].try_into().unwrap()),
        }
    }
}

/// Unordered set of the particles inside one cube.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub cube_id: CubeId,
    members: HashMap<u64, Particle, FibonacciBuild>,
}

impl ParticleSet {
    pub fn new(cube_id: CubeId) -> Self {
        Self {
            cube_id,
            members: HashMap::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Insert; returns the previous entry when the id was already present.
    pub fn insert(&mut self, p: Particle) -> Option<Particle> {
        self.members.insert(p.global_id, p)
    }

    pub fn remove(&mut self, id: u64) -> Option<Particle> {
        self.members.remove(&id)
    }

    pub fn get(&self, id: u64) -> Option<&Particle> {
        self.members.get(&id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.members.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Particle> {
        self.members.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Particle> {
        self.members.values_mut()
    }

    /// Members ordered by id; used wherever summation order matters.
    pub fn sorted(&self) -> Vec<Particle> {
        let mut v: Vec<Particle> = self.members.values().copied().collect();
        v.sort_unstable_by_key(|p| p.global_id);
        v
    }
}

/// Start-up ramp `max(0, tanh(alpha (t - t0)))` applied to the angular velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ramp {
    pub alpha: f64,
    pub t0: f64,
}

impl Ramp {
    pub fn factor(&self, t: f64) -> f64 {
        (self.alpha * (t - self.t0)).tanh().max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidBody {
    pub body_id: u32,
    pub triangles: Vec<[[f64; 3]; 3]>,
    /// Reference centre at t = 0; translates with the linear velocity.
    pub center: [f64; 3],
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub ramp: Option<Ramp>,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl RigidBody {
    pub fn new(body_id: u32, triangles: Vec<[[f64; 3]; 3]>, center: [f64; 3]) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Geometry("body has no triangles".into()));
        }
        Ok(Self {
            body_id,
            triangles,
            center,
            linear_velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
            ramp: None,
        })
    }

    /// Icosphere approximation of a sphere; `subdivisions` 0 gives 20 faces.
    pub fn sphere(body_id: u32, center: [f64; 3], radius: f64, subdivisions: u32) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<[f64; 3]> = vec![
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let normalize = |v: [f64; 3]| {
            let n = norm(v);
            [v[0] / n, v[1] / n, v[2] / n]
        };
        for v in &mut verts {
            *v = normalize(*v);
        }
        for _ in 0..subdivisions {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| {
                let key = (a.min(b), a.max(b));
                *mid.entry(key).or_insert_with(|| {
                    let (p, q) = (verts[a], verts[b]);
                    verts.push(normalize([
                        (p[0] + q[0]) / 2.0,
                        (p[1] + q[1]) / 2.0,
                        (p[2] + q[2]) / 2.0,
                    ]));
                    verts.len() - 1
                })
            };
            for f in &faces {
                let a = midpoint(f[0], f[1], &mut verts);
                let b = midpoint(f[1], f[2], &mut verts);
                let c = midpoint(f[2], f[0], &mut verts);
                next.push([f[0], a, c]);
                next.push([f[1], b, a]);
                next.push([f[2], c, b]);
                next.push([a, b, c]);
            }
            faces = next;
        }
        let place = |v: [f64; 3]| {
            [
                center[0] + radius * v[0],
                center[1] + radius * v[1],
                center[2] + radius * v[2],
            ]
        };
        let triangles = faces
            .iter()
            .map(|f| [place(verts[f[0]]), place(verts[f[1]]), place(verts[f[2]])])
            .collect();
        Self {
            body_id,
            triangles,
            center,
            linear_velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
            ramp: None,
        }
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(triangle_area).sum()
    }

    pub fn center_at(&self, t: f64) -> [f64; 3] {
        let u = self.linear_velocity;
        [
            self.center[0] + u[0] * t,
            self.center[1] + u[1] * t,
            self.center[2] + u[2] * t,
        ]
    }

    pub fn angular_velocity_at(&self, t: f64) -> [f64; 3] {
        let f = self.ramp.map_or(1.0, |r| r.factor(t));
        let w = self.angular_velocity;
        [w[0] * f, w[1] * f, w[2] * f]
    }

    pub fn bounds(&self) -> Aabb {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for t in &self.triangles {
            for v in t {
                for a in 0..3 {
                    min[a] = min[a].min(v[a]);
                    max[a] = max[a].max(v[a]);
                }
            }
        }
        Aabb::new(min, max)
    }
}

/// Prescribed rigid velocity `U0 + w(t) x (X - c(t))`.
pub fn body_velocity(body: &RigidBody, x: [f64; 3], t: f64) -> [f64; 3] {
    let r = sub(x, body.center_at(t));
    let w = cross(body.angular_velocity_at(t), r);
    let u = body.linear_velocity;
    [u[0] + w[0], u[1] + w[1], u[2] + w[2]]
}

pub fn triangle_area(t: &[[f64; 3]; 3]) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

/// Clip a convex polygon against `coord[axis] >= bound` (keep_above) or `<= bound`.
fn clip(poly: &[[f64; 3]], axis: usize, bound: f64, keep_above: bool) -> Vec<[f64; 3]> {
    let inside = |p: &[f64; 3]| {
        if keep_above {
            p[axis] >= bound
        } else {
            p[axis] <= bound
        }
    };
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ia, ib) = (inside(&a), inside(&b));
        if ia {
            out.push(a);
        }
        if ia != ib {
            let s = (bound - a[axis]) / (b[axis] - a[axis]);
            let mut p = [
                a[0] + s * (b[0] - a[0]),
                a[1] + s * (b[1] - a[1]),
                a[2] + s * (b[2] - a[2]),
            ];
            p[axis] = bound;
            out.push(p);
        }
    }
    out
}

/// Area and centroid of a planar convex polygon.
fn polygon_area_centroid(poly: &[[f64; 3]]) -> (f64, [f64; 3]) {
    if poly.len() < 3 {
        return (0.0, [0.0; 3]);
    }
    let o = poly[0];
    let mut area = 0.0;
    let mut c = [0.0; 3];
    for i in 1..poly.len() - 1 {
        let a = triangle_area(&[o, poly[i], poly[i + 1]]);
        area += a;
        for k in 0..3 {
            c[k] += a * (o[k] + poly[i][k] + poly[i + 1][k]) / 3.0;
        }
    }
    if area > 0.0 {
        (area, [c[0] / area, c[1] / area, c[2] / area])
    } else {
        (0.0, [0.0; 3])
    }
}

/// One particle per Eulerian cell intersected by the body surface, placed at
/// the area-weighted centroid of the surface fragments inside that cell.
/// Ids are assigned densely from `first_id`, ordered by (cube, cell).
pub fn discretize_surface(
    body: &RigidBody,
    mesh: &BcmMesh,
    first_id: u64,
) -> Result<Vec<Particle>> {
    let n = mesh.n_cells_per_edge() as i64;
    let bb = mesh.bounding_box();
    let unit = mesh.lattice_unit();
    let ext = mesh.lattice_extent();
    // (cube, cell linear index) -> (area, area-weighted position sum)
    let mut acc: BTreeMap<(CubeId, i64), (f64, [f64; 3])> = BTreeMap::new();
    for tri in &body.triangles {
        let area = triangle_area(tri);
        if !(area > 0.0) {
            continue;
        }
        let mut tmin = [f64::INFINITY; 3];
        let mut tmax = [f64::NEG_INFINITY; 3];
        for v in tri {
            for a in 0..3 {
                tmin[a] = tmin[a].min(v[a]);
                tmax[a] = tmax[a].max(v[a]);
            }
        }
        for a in 0..3 {
            if tmin[a] < bb.min[a] || tmax[a] > bb.max[a] {
                return Err(Error::Geometry(format!(
                    "body {} extends outside the mesh along axis {a}",
                    body.body_id
                )));
            }
        }
        let mut lo = [0u32; 3];
        let mut hi = [0u32; 3];
        for a in 0..3 {
            lo[a] = (((tmin[a] - bb.min[a]) / unit).floor().max(0.0) as u32).min(ext[a] - 1);
            hi[a] = (((tmax[a] - bb.min[a]) / unit).floor().max(0.0) as u32).min(ext[a] - 1);
        }
        let mut cubes = Vec::new();
        for qz in lo[2]..=hi[2] {
            for qy in lo[1]..=hi[1] {
                for qx in lo[0]..=hi[0] {
                    if let Some(c) = mesh.locate_lattice([qx, qy, qz]) {
                        cubes.push(c);
                    }
                }
            }
        }
        cubes.sort_unstable();
        cubes.dedup();
        for cid in cubes {
            let cube = mesh.cube(cid);
            let dx = cube.cell_spacing;
            let mut clo = [0i64; 3];
            let mut chi = [0i64; 3];
            for a in 0..3 {
                clo[a] = (((tmin[a] - cube.base_corner[a]) / dx).floor() as i64).clamp(0, n - 1);
                chi[a] = (((tmax[a] - cube.base_corner[a]) / dx).floor() as i64).clamp(0, n - 1);
            }
            for k in clo[2]..=chi[2] {
                for j in clo[1]..=chi[1] {
                    for i in clo[0]..=chi[0] {
                        let idx = [i, j, k];
                        let mut poly: Vec<[f64; 3]> = tri.to_vec();
                        for a in 0..3 {
                            let lo = cube.base_corner[a] + idx[a] as f64 * dx;
                            poly = clip(&poly, a, lo, true);
                            if poly.is_empty() {
                                break;
                            }
                            poly = clip(&poly, a, lo + dx, false);
                            if poly.is_empty() {
                                break;
                            }
                        }
                        let (fa, fc) = polygon_area_centroid(&poly);
                        if fa <= 1e-12 * dx * dx {
                            continue;
                        }
                        let e = acc
                            .entry((cid, (k * n + j) * n + i))
                            .or_insert((0.0, [0.0; 3]));
                        e.0 += fa;
                        for a in 0..3 {
                            e.1[a] += fa * fc[a];
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(acc.len());
    for (id, ((cid, _), (area, m))) in (first_id..).zip(acc) {
        let dx = mesh.cube(cid).cell_spacing;
        out.push(Particle::new(
            id,
            [m[0] / area, m[1] / area, m[2] / area],
            area * dx,
            body.body_id,
        ));
    }
    Ok(out)
}

/// Group particles into one set per cube (indexed by global cube id).
pub fn assign_sets(particles: &[Particle], mesh: &BcmMesh) -> Result<Vec<ParticleSet>> {
    let mut sets: Vec<ParticleSet> = (0..mesh.len()).map(ParticleSet::new).collect();
    for p in particles {
        let c = mesh.locate_cube(p.x).ok_or(Error::ParticleOutside {
            id: p.global_id,
            pos: p.x,
        })?;
        if sets[c].insert(*p).is_some() {
            return Err(Error::Geometry(format!(
                "duplicate particle id {}",
                p.global_id
            )));
        }
    }
    Ok(sets)
}

/// Explicit Euler update `X += dt * U_s(X, t_new)`; sets are not regrouped.
pub fn advect(sets: &mut [ParticleSet], bodies: &[RigidBody], dt: f64, t_new: f64) {
    for s in sets {
        for p in s.iter_mut() {
            if let Some(b) = bodies.iter().find(|b| b.body_id == p.body_id) {
                let u = body_velocity(b, p.x, t_new);
                for a in 0..3 {
                    p.x[a] += dt * u[a];
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MigrationStats {
    pub moved_local: usize,
    pub sent: usize,
    pub received: usize,
    pub exited: usize,
}

/// Move every particle into the set of the cube that contains it, across
/// ranks if needed. `sets` are this rank's sets in local order. Particles
/// leaving the domain are dropped and counted. Collective over all ranks.
pub fn migrate(
    sets: &mut [ParticleSet],
    mesh: &BcmMesh,
    dist: &Distribution,
    ep: &Endpoint,
    epoch: u64,
) -> Result<MigrationStats> {
    let me = ep.rank();
    let mut stats = MigrationStats::default();
    let mut outgoing: Vec<Vec<(CubeId, Particle)>> = vec![Vec::new(); ep.size()];
    let mut local_moves: Vec<(CubeId, Particle)> = Vec::new();
    for s in sets.iter_mut() {
        let leaving: Vec<(u64, Option<CubeId>)> = s
            .iter()
            .filter_map(|p| {
                let c = mesh.locate_cube(p.x);
                (c != Some(s.cube_id)).then_some((p.global_id, c))
            })
            .collect();
        for (id, dest) in leaving {
            let p = s.remove(id).unwrap();
            match dest {
                None => stats.exited += 1,
                Some(c) if dist.owner(c) == me => local_moves.push((c, p)),
                Some(c) => outgoing[dist.owner(c).0].push((c, p)),
            }
        }
    }
    local_moves.sort_unstable_by_key(|(_, p)| p.global_id);
    for (c, p) in local_moves {
        let li = dist.local_index(c);
        debug_assert_eq!(sets[li].cube_id, c);
        if sets[li].insert(p).is_some() {
            return Err(Error::Geometry(format!(
                "duplicate particle id {}",
                p.global_id
            )));
        }
        stats.moved_local += 1;
    }
    if ep.size() == 1 {
        return Ok(stats);
    }
    let tag = make_tag(tag_kind::PARTICLES, 0, epoch);
    let mut sends = Vec::new();
    for (r, list) in outgoing.iter().enumerate() {
        if r == me.0 {
            continue;
        }
        let mut buf = Vec::with_capacity(8 + list.len() * (8 + Particle::WIRE_BYTES));
        buf.extend_from_slice(&(list.len() as u64).to_le_bytes());
        for (c, p) in list {
            buf.extend_from_slice(&(*c as u64).to_le_bytes());
            p.write_to(&mut buf);
        }
        stats.sent += list.len();
        sends.push(ep.post_send(RankId(r), tag, buf)?);
    }
    let mut recvs = Vec::new();
    for r in (0..ep.size()).filter(|&r| r != me.0) {
        recvs.push(ep.post_recv(RankId(r), tag)?);
    }
    ep.wait_all(&mut recvs)?;
    ep.wait_all(&mut sends)?;
    let mut incoming = Vec::new();
    for h in &recvs {
        let b = h.payload().unwrap();
        let count = u64::from_le_bytes(b[0..8].try_into().unwrap()) as usize;
        let rec = 8 + Particle::WIRE_BYTES;
        for k in 0..count {
            let o = 8 + k * rec;
            let c = u64::from_le_bytes(b[o..o + 8].try_into().unwrap()) as usize;
            incoming.push((c, Particle::read_from(&b[o + 8..o + rec])));
        }
    }
    incoming.sort_unstable_by_key(|(_, p)| p.global_id);
    for (c, p) in incoming {
        let li = dist.local_index(c);
        if sets[li].insert(p).is_some() {
            return Err(Error::Geometry(format!(
                "duplicate particle id {}",
                p.global_id
            )));
        }
        stats.received += 1;
    }
    Ok(stats)
}

/// Read an STL file, binary or ASCII.
pub fn read_stl(path: &Path) -> Result<Vec<[[f64; 3]; 3]>> {
    let bytes = std::fs::read(path)?;
    parse_stl(&bytes)
}

pub fn parse_stl(bytes: &[u8]) -> Result<Vec<[[f64; 3]; 3]>> {
    if bytes.len() >= 84 {
        let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if 84 + 50 * n == bytes.len() {
            let mut tris = Vec::with_capacity(n);
            for t in 0..n {
                let o = 84 + 50 * t + 12;
                let f = |k: usize| {
                    f64::from(f32::from_le_bytes(
                        bytes[o + 4 * k..o + 4 * k + 4].try_into().unwrap(),
                    ))
                };
                tris.push([[f(0), f(1), f(2)], [f(3), f(4), f(5)], [f(6), f(7), f(8)]]);
            }
            return Ok(tris);
        }
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Geometry("STL is neither binary nor ASCII".into()))?;
    let mut verts = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        if it.next() == Some("vertex") {
            let v: Vec<f64> = it
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Geometry(format!("bad STL vertex: {e}")))?;
            if v.len() != 3 {
                return Err(Error::Geometry("STL vertex needs 3 coordinates".into()));
            }
            verts.push([v[0], v[1], v[2]]);
        }
    }
    if verts.len() % 3 != 0 || verts.is_empty() {
        return Err(Error::Geometry("STL has no complete facets".into()));
    }
    Ok(verts.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::linear_distribution;
    use crate::mesh::{generate_mesh, MeshSpec};
    use crate::transport::Transport;

    fn slab_mesh() -> BcmMesh {
        generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), 1.0, 4)).unwrap()
    }

    #[test]
    fn square_gives_four_centroid_particles() {
        // two triangles spanning cells (1..3, 1..3) at the mid-plane of layer k=1
        let m = slab_mesh();
        let z = 0.375;
        let tris = vec![
            [[0.25, 0.25, z], [0.75, 0.25, z], [0.75, 0.75, z]],
            [[0.25, 0.25, z], [0.75, 0.75, z], [0.25, 0.75, z]],
        ];
        let body = RigidBody::new(0, tris, [0.5, 0.5, z]).unwrap();
        let ps = discretize_surface(&body, &m, 0).unwrap();
        assert_eq!(ps.len(), 4);
        let mut centres: Vec<[f64; 2]> = ps.iter().map(|p| [p.x[0], p.x[1]]).collect();
        centres.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // each fragment is a full 0.25 x 0.25 square, centroid at the cell centre
        let expect = [
            [0.375, 0.375],
            [0.375, 0.625],
            [0.625, 0.375],
            [0.625, 0.625],
        ];
        for (c, e) in centres.iter().zip(expect) {
            assert!((c[0] - e[0]).abs() < 1e-14 && (c[1] - e[1]).abs() < 1e-14);
        }
        for p in &ps {
            assert!((p.dc_volume - 0.0625 * 0.25).abs() < 1e-15);
            assert!((p.x[2] - z).abs() < 1e-15);
        }
        assert_eq!(
            ps.iter().map(|p| p.global_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn degenerate_triangle_ignored() {
        let m = slab_mesh();
        let tris = vec![[[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.3, 0.3]]];
        let body = RigidBody::new(0, tris, [0.2; 3]).unwrap();
        assert!(discretize_surface(&body, &m, 0).unwrap().is_empty());
    }

    #[test]
    fn outside_surface_rejected() {
        let m = slab_mesh();
        let body = RigidBody::sphere(0, [1.0, 0.5, 0.5], 0.3, 1);
        assert!(discretize_surface(&body, &m, 0).is_err());
        assert!(RigidBody::new(0, vec![], [0.0; 3]).is_err());
    }

    #[test]
    fn sets_partition_particles() {
        let m = generate_mesh(&MeshSpec::uniform(
            Aabb::new([0.0; 3], [2.0, 1.0, 1.0]),
            1.0,
            4,
        ))
        .unwrap();
        let ps = vec![
            Particle::new(0, [0.2, 0.5, 0.5], 1.0, 0),
            Particle::new(1, [1.0, 0.5, 0.5], 1.0, 0),
            Particle::new(2, [1.7, 0.5, 0.5], 1.0, 0),
        ];
        let sets = assign_sets(&ps, &m).unwrap();
        assert_eq!(sets[0].len(), 1);
        assert!(sets[1].contains(1), "face particle goes to the upper cube");
        assert_eq!(sets.iter().map(ParticleSet::len).sum::<usize>(), 3);
        let bad = vec![Particle::new(9, [3.0, 0.5, 0.5], 1.0, 0)];
        assert!(matches!(
            assign_sets(&bad, &m),
            Err(Error::ParticleOutside { .. })
        ));
    }

    #[test]
    fn body_velocity_examples() {
        let mut b = RigidBody::sphere(0, [0.0; 3], 1.0, 0);
        b.linear_velocity = [1.0, 2.0, 3.0];
        assert_eq!(body_velocity(&b, [5.0, 1.0, 0.0], 0.7), [1.0, 2.0, 3.0]);
        b.linear_velocity = [0.0; 3];
        b.angular_velocity = [0.0, 0.0, 1.0];
        assert_eq!(body_velocity(&b, [1.0, 0.0, 0.0], 0.0), [0.0, 1.0, 0.0]);
        b.ramp = Some(Ramp {
            alpha: 20.0,
            t0: 0.3,
        });
        assert_eq!(b.angular_velocity_at(0.3), [0.0, 0.0, 0.0]);
        assert!((b.angular_velocity_at(1.0)[2] - (20.0f64 * 0.7).tanh()).abs() < 1e-15);
    }

    #[test]
    fn advect_translates() {
        let mut b = RigidBody::sphere(0, [0.5; 3], 0.1, 0);
        b.linear_velocity = [1.0, 0.0, 0.0];
        let mut sets = vec![ParticleSet::new(0)];
        sets[0].insert(Particle::new(0, [0.2, 0.3, 0.4], 1.0, 0));
        advect(&mut sets, std::slice::from_ref(&b), 0.1, 0.1);
        let p = sets[0].get(0).unwrap();
        assert!((p.x[0] - 0.3).abs() < 1e-15 && p.x[1] == 0.3 && p.x[2] == 0.4);
        b.linear_velocity = [0.0; 3];
        let before = sets.clone();
        advect(&mut sets, std::slice::from_ref(&b), 0.1, 0.2);
        assert_eq!(sets, before);
    }

    #[test]
    fn rotation_preserves_distances_to_first_order() {
        let mut b = RigidBody::sphere(0, [0.0; 3], 1.0, 0);
        b.angular_velocity = [0.0, 0.0, 2.0];
        let mut sets = vec![ParticleSet::new(0)];
        sets[0].insert(Particle::new(0, [0.5, 0.0, 0.0], 1.0, 0));
        sets[0].insert(Particle::new(1, [0.0, 0.3, 0.1], 1.0, 0));
        let d0 = norm(sub(sets[0].get(0).unwrap().x, sets[0].get(1).unwrap().x));
        let dt = 1e-3;
        let steps = 200;
        for s in 1..=steps {
            advect(&mut sets, std::slice::from_ref(&b), dt, s as f64 * dt);
        }
        let d1 = norm(sub(sets[0].get(0).unwrap().x, sets[0].get(1).unwrap().x));
        // explicit Euler on a rotation inflates radii by (1 + (w dt)^2)^(1/2) per step
        let bound = d0 * ((1.0 + (2.0 * dt).powi(2)).powf(steps as f64 / 2.0) - 1.0) * 1.01;
        assert!(
            (d1 - d0).abs() <= bound + 1e-15,
            "drift {} > {}",
            (d1 - d0).abs(),
            bound
        );
    }

    #[test]
    fn migrate_within_rank() {
        let m = generate_mesh(&MeshSpec::uniform(
            Aabb::new([0.0; 3], [2.0, 1.0, 1.0]),
            1.0,
            4,
        ))
        .unwrap();
        let dist = linear_distribution(2, 1).unwrap();
        let (_t, eps) = Transport::new(1, None).unwrap();
        let mut sets = assign_sets(&[Particle::new(5, [0.9, 0.5, 0.5], 1.0, 0)], &m).unwrap();
        let unchanged = sets.clone();
        migrate(&mut sets, &m, &dist, &eps[0], 0).unwrap();
        assert_eq!(sets, unchanged);
        sets[0].iter_mut().for_each(|p| p.x[0] = 1.1);
        let st = migrate(&mut sets, &m, &dist, &eps[0], 1).unwrap();
        assert_eq!(st.moved_local, 1);
        assert!(sets[0].is_empty() && sets[1].contains(5));
        sets[1].iter_mut().for_each(|p| p.x[0] = 2.5);
        let st = migrate(&mut sets, &m, &dist, &eps[0], 2).unwrap();
        assert_eq!(st.exited, 1);
        assert!(sets.iter().all(ParticleSet::is_empty));
    }

    #[test]
    fn stl_ascii_and_binary() {
        let ascii = "solid t\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\nendsolid t\n";
        let t = parse_stl(ascii.as_bytes()).unwrap();
        assert_eq!(t, vec![[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]);
        let mut bin = vec![0u8; 80];
        bin.extend_from_slice(&1u32.to_le_bytes());
        for v in [
            0.0f32, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0,
        ] {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        bin.extend_from_slice(&[0, 0]);
        assert_eq!(parse_stl(&bin).unwrap(), t);
    }

    #[test]
    fn set_operations_scale() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParticleSet::new(0);
        let n = 200_000u64;
        let start = std::time::Instant::now();
        for _ in 0..n {
            let id = rng.gen_range(0..n);
            match rng.gen_range(0..3) {
                0 => {
                    s.insert(Particle::new(id, [0.0; 3], 1.0, 0));
                }
                1 => {
                    s.remove(id);
                }
                _ => {
                    s.contains(id);
                }
            }
        }
        // generous wall-clock guard against accidental linear scans
        assert!(start.elapsed().as_secs_f64() < 5.0);
    }
}
