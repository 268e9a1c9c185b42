//! Halo filling between cubes: same-level copy, coarse-to-fine injection and
//! fine-to-coarse averaging, across ranks with overlapped completion, plus
//! the transposed (accumulating) exchange used for force spreading.
//!
//! Every halo cell is located directly by its centre point, so edge and
//! corner neighbours are served without a face sweep. Cells outside the
//! domain are ghost cells filled from boundary conditions.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::decomp::Distribution;
use crate::error::{Error, Result};
use crate::field::{Field, Layout, Quantity};
use crate::mesh::{BcmMesh, CubeId};
use crate::transport::{make_tag, tag_kind, Endpoint, MessageHandle, RankId};

/// Uniform volume-average weights for a 2x2x2 block.
pub const UNIFORM_WEIGHTS: [f64; 8] = [0.125; 8];

/// Weighted combination of a 2x2x2 fine block (x fastest).
#[inline]
pub fn fine_to_coarse(values: &[f64; 8], weights: &[f64; 8]) -> f64 {
    let mut s = 0.0;
    for p in 0..8 {
        s += weights[p] * values[p];
    }
    s
}

/// Piecewise-constant injection of a coarse value into its 8 children.
#[inline]
pub fn coarse_to_fine(value: f64) -> [f64; 8] {
    [value; 8]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transfer {
    Copy,
    /// Source cell is coarser; its value is injected.
    Inject,
    /// Source is the finer 2x2x2 block starting at `idx`.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaloEntry {
    pub dst_idx: u32,
    pub src_cube: u32,
    pub src_idx: u32,
    pub kind: Transfer,
}

/// Ghost cell outside the domain, mirrored along `axis` onto `mirror_idx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GhostEntry {
    pub dst_idx: u32,
    pub mirror_idx: u32,
    pub axis: u8,
    pub high: bool,
}

/// Global source map for every halo cell of every cube for one layout.
#[derive(Clone, Debug)]
pub struct HaloMap {
    layout: Layout,
    entries: Vec<Vec<HaloEntry>>,
    ghosts: Vec<Vec<GhostEntry>>,
    neighbors: Vec<Vec<CubeId>>,
}

impl HaloMap {
    /// `layout.cells` may be any even divisor of the mesh cell count (used by
    /// coarse multigrid levels).
    pub fn build(mesh: &BcmMesh, layout: Layout) -> Result<Self> {
        let n = layout.cells as i64;
        let nm = mesh.n_cells_per_edge();
        if layout.cells < 2 || !nm.is_multiple_of(layout.cells) || !layout.cells.is_multiple_of(2) {
            return Err(Error::Mesh(format!(
                "halo layout of {} cells incompatible with {nm}",
                layout.cells
            )));
        }
        if 2 * layout.halo > layout.cells.max(2) {
            return Err(Error::Mesh("halo wider than half a cube".into()));
        }
        let ext = mesh.lattice_extent();
        let half_ext: Vec<i64> = ext.iter().map(|&e| 2 * n * i64::from(e)).collect();
        let per_cube: Vec<(Vec<HaloEntry>, Vec<GhostEntry>, Vec<CubeId>)> = mesh
            .cubes()
            .par_iter()
            .map(|cube| {
                let r = i64::from(mesh.lattice_edge(cube.level));
                let l = cube.lattice.map(i64::from);
                let mut entries = Vec::new();
                let mut ghosts: Vec<(u32, GhostEntry)> = Vec::new();
                let mut nb = Vec::new();
                for idx in layout.halo_cells() {
                    let c = layout.coords(idx);
                    let p: [i64; 3] = std::array::from_fn(|a| 2 * n * l[a] + (2 * c[a] + 1) * r);
                    let outside: Vec<usize> = (0..3)
                        .filter(|&a| p[a] < 0 || p[a] >= half_ext[a])
                        .collect();
                    if let Some(&a) = outside.first() {
                        let high = p[a] >= half_ext[a];
                        let mut m = c;
                        m[a] = if high { 2 * n - 1 - c[a] } else { -c[a] - 1 };
                        ghosts.push((
                            outside.len() as u32,
                            GhostEntry {
                                dst_idx: idx as u32,
                                mirror_idx: layout.index(m[0], m[1], m[2]) as u32,
                                axis: a as u8,
                                high,
                            },
                        ));
                        continue;
                    }
                    let q = p.map(|v| (v / (2 * n)) as u32);
                    let s = mesh.locate_lattice(q).expect("mesh covers its domain");
                    let sc = mesh.cube(s);
                    let rs = i64::from(mesh.lattice_edge(sc.level));
                    let ls = sc.lattice.map(i64::from);
                    let (kind, si): (Transfer, [i64; 3]) = if rs == r {
                        (
                            Transfer::Copy,
                            std::array::from_fn(|a| (p[a] - 2 * n * ls[a] - rs) / (2 * rs)),
                        )
                    } else if rs > r {
                        (
                            Transfer::Inject,
                            std::array::from_fn(|a| (p[a] - 2 * n * ls[a]).div_euclid(2 * rs)),
                        )
                    } else {
                        (
                            Transfer::Average,
                            std::array::from_fn(|a| (p[a] - r - 2 * n * ls[a]) / (2 * rs)),
                        )
                    };
                    debug_assert!(layout.is_interior(si));
                    entries.push(HaloEntry {
                        dst_idx: idx as u32,
                        src_cube: s as u32,
                        src_idx: layout.index(si[0], si[1], si[2]) as u32,
                        kind,
                    });
                    nb.push(s);
                }
                ghosts.sort_by_key(|(k, g)| (*k, g.dst_idx));
                nb.sort_unstable();
                nb.dedup();
                (entries, ghosts.into_iter().map(|(_, g)| g).collect(), nb)
            })
            .collect();
        let mut entries = Vec::with_capacity(per_cube.len());
        let mut ghosts = Vec::with_capacity(per_cube.len());
        let mut neighbors = Vec::with_capacity(per_cube.len());
        for (e, g, nb) in per_cube {
            entries.push(e);
            ghosts.push(g);
            neighbors.push(nb);
        }
        Ok(Self {
            layout,
            entries,
            ghosts,
            neighbors,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn entries(&self, cube: CubeId) -> &[HaloEntry] {
        &self.entries[cube]
    }

    pub fn ghosts(&self, cube: CubeId) -> &[GhostEntry] {
        &self.ghosts[cube]
    }

    /// Cubes supplying halo data to `cube` (face, edge and corner neighbours).
    pub fn neighbors(&self, cube: CubeId) -> &[CubeId] {
        &self.neighbors[cube]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Zone {
    Internal,
    External,
}

/// Zone per global cube: external iff some neighbour lives on another rank.
pub fn classify_zones(map: &HaloMap, dist: &Distribution) -> Vec<Zone> {
    (0..dist.n_cubes())
        .map(|g| {
            let me = dist.owner(g);
            if map.neighbors(g).iter().any(|&s| dist.owner(s) != me) {
                Zone::External
            } else {
                Zone::Internal
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Boundary {
    NoSlip,
    Slip,
    Inflow([f64; 3]),
    Outflow,
}

/// Boundary kind per domain face, indexed `2 * axis + high`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryConditions {
    pub faces: [Boundary; 6],
}

impl BoundaryConditions {
    pub fn all(b: Boundary) -> Self {
        Self { faces: [b; 6] }
    }

    pub fn has_outflow(&self) -> bool {
        self.faces.iter().any(|f| matches!(f, Boundary::Outflow))
    }

    /// Ghost value from the mirror value for component `comp` of a field.
    #[inline]
    fn ghost(
        &self,
        quantity: Quantity,
        ncomp: usize,
        comp: usize,
        axis: usize,
        high: bool,
        m: f64,
    ) -> f64 {
        let b = self.faces[2 * axis + usize::from(high)];
        match quantity {
            Quantity::Force => 0.0,
            Quantity::Velocity if ncomp == 3 => match b {
                Boundary::NoSlip => -m,
                Boundary::Slip if comp == axis => -m,
                Boundary::Slip | Boundary::Outflow => m,
                Boundary::Inflow(u0) => 2.0 * u0[comp] - m,
            },
            // pressure-like scalars: zero value at outflow, zero gradient elsewhere
            _ => match b {
                Boundary::Outflow => -m,
                _ => m,
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LocalEntry {
    dst_idx: u32,
    src_local: u32,
    src_idx: u32,
    kind: Transfer,
}

#[derive(Clone, Copy, Debug)]
struct SendEntry {
    src_local: u32,
    src_idx: u32,
    kind: Transfer,
    dst_gid: u32,
    dst_idx: u32,
}

#[derive(Clone, Copy, Debug)]
enum Origin {
    Local { cube: u32, idx: u32 },
    Remote { slot: u32, pos: u32 },
}

#[derive(Clone, Copy, Debug)]
struct RevEntry {
    cell: u32,
    factor: f64,
    origin: Origin,
}

/// One rank's schedule for exchanging fields of a given layout.
#[derive(Debug)]
pub struct ExchangePlan {
    rank: RankId,
    layout: Layout,
    bc: BoundaryConditions,
    local_gids: Vec<CubeId>,
    local: Vec<Vec<LocalEntry>>,
    sends: Vec<(RankId, Vec<SendEntry>)>,
    recvs: Vec<(RankId, Vec<(u32, u32)>)>,
    ghosts: Vec<Vec<GhostEntry>>,
    zones: Vec<Zone>,
    internal: Vec<usize>,
    external: Vec<usize>,
    all: Vec<usize>,
    reverse: Vec<Vec<RevEntry>>,
}

static TOKENS: AtomicU64 = AtomicU64::new(1);

/// Transpose factor of a forward transfer under the volume-weighted inner
/// product (the destination halo cell volume over the source cell volume).
fn reverse_targets(kind: Transfer, src_idx: u32, lay: Layout) -> Vec<(u32, f64)> {
    match kind {
        Transfer::Copy => vec![(src_idx, 1.0)],
        Transfer::Inject => vec![(src_idx, 0.125)],
        Transfer::Average => block_offsets(lay)
            .iter()
            .map(|&o| (src_idx + o as u32, 1.0))
            .collect(),
    }
}

#[inline]
fn block_offsets(lay: Layout) -> [usize; 8] {
    let (sy, sz) = (lay.stride(1), lay.stride(2));
    [0, 1, sy, sy + 1, sz, sz + 1, sz + sy, sz + sy + 1]
}

#[inline]
fn source_value(arr: &[f64], offs: &[usize; 8], kind: Transfer, idx: usize) -> f64 {
    match kind {
        Transfer::Copy | Transfer::Inject => arr[idx],
        Transfer::Average => {
            let v: [f64; 8] = std::array::from_fn(|p| arr[idx + offs[p]]);
            fine_to_coarse(&v, &UNIFORM_WEIGHTS)
        }
    }
}

/// Distance of a halo cell from the interior (0 for interior cells).
fn halo_depth(lay: Layout, idx: u32) -> usize {
    let n = lay.cells as i64;
    lay.coords(idx as usize)
        .iter()
        .map(|&c| (-c).max(c - n + 1).max(0) as usize)
        .max()
        .unwrap()
}

impl ExchangePlan {
    pub fn new(map: &HaloMap, dist: &Distribution, rank: RankId, bc: BoundaryConditions) -> Self {
        Self::with_depth(map, dist, rank, bc, map.layout().halo)
    }

    /// Plan that fills only the innermost `depth` halo layers, for stencils
    /// that reach no further. Deeper layers are left untouched.
    pub fn with_depth(
        map: &HaloMap,
        dist: &Distribution,
        rank: RankId,
        bc: BoundaryConditions,
        depth: usize,
    ) -> Self {
        let layout = map.layout();
        let keep = |idx: u32| depth >= layout.halo || halo_depth(layout, idx) <= depth;
        let local_gids: Vec<CubeId> = dist.local_cubes(rank).to_vec();
        let nranks = dist.n_ranks();
        let mut local = Vec::with_capacity(local_gids.len());
        let mut recv_lists: Vec<Vec<(u32, u32)>> = vec![Vec::new(); nranks];
        let mut zones = Vec::with_capacity(local_gids.len());
        let mut ghosts = Vec::with_capacity(local_gids.len());
        for (li, &g) in local_gids.iter().enumerate() {
            let mut l = Vec::new();
            let mut external = false;
            for e in map.entries(g).iter().filter(|e| keep(e.dst_idx)) {
                let owner = dist.owner(e.src_cube as usize);
                if owner == rank {
                    l.push(LocalEntry {
                        dst_idx: e.dst_idx,
                        src_local: dist.local_index(e.src_cube as usize) as u32,
                        src_idx: e.src_idx,
                        kind: e.kind,
                    });
                } else {
                    external = true;
                    recv_lists[owner.0].push((li as u32, e.dst_idx));
                }
            }
            local.push(l);
            zones.push(if external {
                Zone::External
            } else {
                Zone::Internal
            });
            ghosts.push(
                map.ghosts(g)
                    .iter()
                    .filter(|e| keep(e.dst_idx))
                    .copied()
                    .collect(),
            );
        }
        // what this rank must send: halo cells of remote cubes sourced here,
        // ordered by (destination cube, destination cell) on both sides
        let mut send_lists: Vec<Vec<SendEntry>> = vec![Vec::new(); nranks];
        for g in 0..dist.n_cubes() {
            let owner = dist.owner(g);
            if owner == rank {
                continue;
            }
            for e in map.entries(g).iter().filter(|e| keep(e.dst_idx)) {
                if dist.owner(e.src_cube as usize) == rank {
                    send_lists[owner.0].push(SendEntry {
                        src_local: dist.local_index(e.src_cube as usize) as u32,
                        src_idx: e.src_idx,
                        kind: e.kind,
                        dst_gid: g as u32,
                        dst_idx: e.dst_idx,
                    });
                }
            }
        }
        let sends: Vec<(RankId, Vec<SendEntry>)> = send_lists
            .into_iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(r, v)| (RankId(r), v))
            .collect();
        let recvs: Vec<(RankId, Vec<(u32, u32)>)> = recv_lists
            .into_iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(r, v)| (RankId(r), v))
            .collect();

        // transposed schedule, keyed so that summation order is independent
        // of the rank layout
        let mut keyed: Vec<Vec<(u32, u32, u32, RevEntry)>> = vec![Vec::new(); local_gids.len()];
        for (li, l) in local.iter().enumerate() {
            let dst_gid = local_gids[li] as u32;
            for e in l {
                for (cell, factor) in reverse_targets(e.kind, e.src_idx, layout) {
                    keyed[e.src_local as usize].push((
                        cell,
                        dst_gid,
                        e.dst_idx,
                        RevEntry {
                            cell,
                            factor,
                            origin: Origin::Local {
                                cube: li as u32,
                                idx: e.dst_idx,
                            },
                        },
                    ));
                }
            }
        }
        for (slot, (_, list)) in sends.iter().enumerate() {
            for (pos, e) in list.iter().enumerate() {
                for (cell, factor) in reverse_targets(e.kind, e.src_idx, layout) {
                    keyed[e.src_local as usize].push((
                        cell,
                        e.dst_gid,
                        e.dst_idx,
                        RevEntry {
                            cell,
                            factor,
                            origin: Origin::Remote {
                                slot: slot as u32,
                                pos: pos as u32,
                            },
                        },
                    ));
                }
            }
        }
        let reverse = keyed
            .into_iter()
            .map(|mut v| {
                v.sort_by_key(|(c, g, i, _)| (*c, *g, *i));
                v.into_iter().map(|(_, _, _, e)| e).collect()
            })
            .collect();
        let internal = (0..zones.len())
            .filter(|&i| zones[i] == Zone::Internal)
            .collect();
        let external = (0..zones.len())
            .filter(|&i| zones[i] == Zone::External)
            .collect();
        let all = (0..zones.len()).collect();
        Self {
            rank,
            layout,
            bc,
            local_gids,
            local,
            sends,
            recvs,
            ghosts,
            zones,
            internal,
            external,
            all,
            reverse,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn boundary(&self) -> &BoundaryConditions {
        &self.bc
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    /// Zone per local cube.
    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn local_gids(&self) -> &[CubeId] {
        &self.local_gids
    }

    /// Local indices of internal cubes, ascending.
    pub fn internal_cubes(&self) -> &[usize] {
        &self.internal
    }

    pub fn external_cubes(&self) -> &[usize] {
        &self.external
    }

    pub fn all_cubes(&self) -> &[usize] {
        &self.all
    }

    /// Number of off-rank halo values received per component.
    pub fn recv_volume(&self) -> usize {
        self.recvs.iter().map(|(_, v)| v.len()).sum()
    }

    fn fill_ghosts(&self, field: &mut Field, cubes: &[usize]) {
        let v = self.layout.volume();
        let (q, nc) = (field.quantity, field.ncomp);
        let bc = self.bc;
        let sel: Vec<(usize, &mut Vec<f64>)> = field
            .cubes
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| cubes.binary_search(i).is_ok())
            .collect();
        sel.into_par_iter().for_each(|(li, arr)| {
            for c in 0..nc {
                let a = &mut arr[c * v..(c + 1) * v];
                for gh in &self.ghosts[li] {
                    let m = a[gh.mirror_idx as usize];
                    a[gh.dst_idx as usize] = bc.ghost(q, nc, c, gh.axis as usize, gh.high, m);
                }
            }
        });
    }
}

/// Outstanding exchange returned by [`exchange_begin`].
#[derive(Debug)]
pub struct PendingExchange {
    token: u64,
    sends: Vec<MessageHandle>,
    recvs: Vec<MessageHandle>,
}

impl PendingExchange {
    pub fn is_trivial(&self) -> bool {
        self.sends.is_empty() && self.recvs.is_empty()
    }
}

fn halo_tag(q: Quantity) -> u64 {
    make_tag(tag_kind::HALO, q.tag_id(), 0)
}

fn pack(field: &Field, plan: &ExchangePlan, list: &[SendEntry]) -> Vec<u8> {
    let v = field.layout.volume();
    let offs = block_offsets(field.layout);
    let mut out = Vec::with_capacity(list.len() * field.ncomp * 8);
    for c in 0..field.ncomp {
        for e in list {
            let arr = &field.cubes[e.src_local as usize][c * v..(c + 1) * v];
            out.extend_from_slice(
                &source_value(arr, &offs, e.kind, e.src_idx as usize).to_le_bytes(),
            );
        }
    }
    debug_assert_eq!(plan.layout, field.layout);
    out
}

/// Start a halo exchange. Every worker of the current thread pool joins:
/// the first to arrive packs and posts the off-rank traffic, the rest (and
/// the packer once done) fill on-rank halos. On return every halo cell with
/// an on-rank source is valid, and internal cubes are complete including
/// boundary ghosts.
pub fn exchange_begin(
    field: &mut Field,
    plan: &ExchangePlan,
    ep: &Endpoint,
) -> Result<PendingExchange> {
    if field.in_flight.is_some() {
        return Err(Error::ExchangeInFlight(field.quantity.name()));
    }
    if field.layout != plan.layout || field.cubes.len() != plan.local.len() {
        return Err(Error::Mesh("field does not match exchange plan".into()));
    }
    let tag = halo_tag(field.quantity);
    let v = field.layout.volume();
    let nc = field.ncomp;
    let offs = block_offsets(field.layout);
    let n_local = plan.local.len();
    let claimed = AtomicBool::new(false);
    let next = AtomicUsize::new(0);
    let posted: Mutex<Option<Result<(Vec<MessageHandle>, Vec<MessageHandle>)>>> = Mutex::new(None);
    let buffers: Vec<Mutex<Vec<f64>>> = (0..n_local).map(|_| Mutex::new(Vec::new())).collect();
    {
        let f: &Field = field;
        let work = || {
            if !claimed.swap(true, Ordering::AcqRel) {
                let res = (|| {
                    let mut recvs = Vec::with_capacity(plan.recvs.len());
                    for (peer, _) in &plan.recvs {
                        recvs.push(ep.post_recv(*peer, tag)?);
                    }
                    let mut sends = Vec::with_capacity(plan.sends.len());
                    for (peer, list) in &plan.sends {
                        sends.push(ep.post_send(*peer, tag, pack(f, plan, list))?);
                    }
                    Ok((sends, recvs))
                })();
                *posted.lock().unwrap() = Some(res);
            }
            loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_local {
                    break;
                }
                let list = &plan.local[i];
                let mut buf = Vec::with_capacity(list.len() * nc);
                for c in 0..nc {
                    for e in list {
                        let arr = &f.cubes[e.src_local as usize][c * v..(c + 1) * v];
                        buf.push(source_value(arr, &offs, e.kind, e.src_idx as usize));
                    }
                }
                *buffers[i].lock().unwrap() = buf;
            }
        };
        if rayon::current_num_threads() > 1 {
            rayon::broadcast(|_| work());
        } else {
            work();
        }
    }
    let (sends, recvs) = posted.into_inner().unwrap().expect("packer ran")?;
    field
        .cubes
        .par_iter_mut()
        .zip(buffers.into_par_iter())
        .enumerate()
        .for_each(|(i, (arr, buf))| {
            let buf = buf.into_inner().unwrap();
            let list = &plan.local[i];
            for c in 0..nc {
                for (k, e) in list.iter().enumerate() {
                    arr[c * v + e.dst_idx as usize] = buf[c * list.len() + k];
                }
            }
        });
    plan.fill_ghosts(field, plan.internal_cubes());
    let token = TOKENS.fetch_add(1, Ordering::Relaxed);
    field.in_flight = Some(token);
    Ok(PendingExchange {
        token,
        sends,
        recvs,
    })
}

/// Complete an exchange: unpack arrivals in whatever order they land, then
/// fill boundary ghosts of external cubes.
pub fn exchange_finalize(
    field: &mut Field,
    plan: &ExchangePlan,
    ep: &Endpoint,
    mut pending: PendingExchange,
) -> Result<()> {
    if field.in_flight != Some(pending.token) {
        return Err(Error::ExchangeInFlight(field.quantity.name()));
    }
    let v = field.layout.volume();
    let nc = field.ncomp;
    let mut remaining = pending.recvs.len();
    while remaining > 0 {
        let done = ep.test_some(&mut pending.recvs);
        if done.is_empty() {
            ep.wait_for_traffic()?;
            continue;
        }
        for slot in done {
            let bytes = pending.recvs[slot].take_payload().unwrap();
            let list = &plan.recvs[slot].1;
            if bytes.len() != list.len() * nc * 8 {
                return Err(Error::Mesh("halo message size mismatch".into()));
            }
            for c in 0..nc {
                for (k, &(dl, di)) in list.iter().enumerate() {
                    let o = (c * list.len() + k) * 8;
                    field.cubes[dl as usize][c * v + di as usize] =
                        f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
                }
            }
            remaining -= 1;
        }
    }
    plan.fill_ghosts(field, plan.external_cubes());
    ep.wait_all(&mut pending.sends)?;
    field.in_flight = None;
    Ok(())
}

/// Blocking exchange.
pub fn exchange(field: &mut Field, plan: &ExchangePlan, ep: &Endpoint) -> Result<()> {
    let p = exchange_begin(field, plan, ep)?;
    exchange_finalize(field, plan, ep, p)
}

/// Transpose of [`exchange`]: every halo value is added back into the cells
/// it was produced from (weighted by the transfer's volume-weighted
/// transpose), then all halos are zeroed. Ghost-cell contents are dropped.
pub fn reverse_exchange(field: &mut Field, plan: &ExchangePlan, ep: &Endpoint) -> Result<()> {
    if field.in_flight.is_some() {
        return Err(Error::ExchangeInFlight(field.quantity.name()));
    }
    let tag = make_tag(tag_kind::REVERSE, field.quantity.tag_id(), 0);
    let v = field.layout.volume();
    let nc = field.ncomp;
    // the forward receive list of each peer is the reverse send list
    let mut sends = Vec::with_capacity(plan.recvs.len());
    for (peer, list) in &plan.recvs {
        let mut out = Vec::with_capacity(list.len() * nc * 8);
        for c in 0..nc {
            for &(dl, di) in list {
                out.extend_from_slice(&field.cubes[dl as usize][c * v + di as usize].to_le_bytes());
            }
        }
        sends.push(ep.post_send(*peer, tag, out)?);
    }
    let mut recvs = Vec::with_capacity(plan.sends.len());
    for (peer, _) in &plan.sends {
        recvs.push(ep.post_recv(*peer, tag)?);
    }
    ep.wait_all(&mut recvs)?;
    let remote: Vec<Vec<f64>> = recvs
        .iter_mut()
        .map(|h| {
            h.take_payload()
                .unwrap()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    let f: &Field = field;
    let updates: Vec<Vec<(u32, f64)>> = (0..plan.reverse.len())
        .into_par_iter()
        .map(|li| {
            let rev = &plan.reverse[li];
            let mut out = Vec::new();
            for c in 0..nc {
                let mut k = 0;
                while k < rev.len() {
                    let cell = rev[k].cell;
                    let mut acc = f.cubes[li][c * v + cell as usize];
                    while k < rev.len() && rev[k].cell == cell {
                        let e = rev[k];
                        let val = match e.origin {
                            Origin::Local { cube, idx } => {
                                f.cubes[cube as usize][c * v + idx as usize]
                            }
                            Origin::Remote { slot, pos } => {
                                let len = plan.sends[slot as usize].1.len();
                                remote[slot as usize][c * len + pos as usize]
                            }
                        };
                        acc += e.factor * val;
                        k += 1;
                    }
                    out.push(((c * v) as u32 + cell, acc));
                }
            }
            out
        })
        .collect();
    for (arr, up) in field.cubes.iter_mut().zip(updates) {
        for (i, val) in up {
            arr[i as usize] = val;
        }
    }
    field.zero_halos();
    ep.wait_all(&mut sends)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::linear_distribution;
    use crate::mesh::{generate_mesh, Aabb, MeshSpec, RefineRegion};

    fn row_mesh(k: usize) -> BcmMesh {
        generate_mesh(&MeshSpec::uniform(
            Aabb::new([0.0; 3], [k as f64, 1.0, 1.0]),
            1.0,
            4,
        ))
        .unwrap()
    }

    #[test]
    fn block_maps() {
        assert_eq!(fine_to_coarse(&[5.0; 8], &UNIFORM_WEIGHTS), 5.0);
        let mut w = [0.0; 8];
        w[0] = 1.0;
        assert_eq!(
            fine_to_coarse(&[7.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0], &w),
            7.0
        );
        assert_eq!(coarse_to_fine(3.5), [3.5; 8]);
        assert_eq!(coarse_to_fine(0.0), [0.0; 8]);
        assert_eq!(
            fine_to_coarse(&coarse_to_fine(2.25), &UNIFORM_WEIGHTS),
            2.25
        );
        // centroid coincidence: children centres at +-1/4 average to the parent centre
        let x: [f64; 8] = std::array::from_fn(|p| 0.5 + if p & 1 == 1 { 0.25 } else { -0.25 });
        assert_eq!(fine_to_coarse(&x, &UNIFORM_WEIGHTS), 0.5);
    }

    #[test]
    fn zones_examples() {
        let m = row_mesh(4);
        let map = HaloMap::build(&m, Layout::new(4, 2)).unwrap();
        let one = linear_distribution(4, 1).unwrap();
        assert!(classify_zones(&map, &one)
            .iter()
            .all(|z| *z == Zone::Internal));
        let two = linear_distribution(4, 2).unwrap();
        assert_eq!(
            classify_zones(&map, &two),
            vec![
                Zone::Internal,
                Zone::External,
                Zone::External,
                Zone::Internal
            ]
        );
        let cube =
            generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [2.0; 3]), 1.0, 4)).unwrap();
        let map = HaloMap::build(&cube, Layout::new(4, 2)).unwrap();
        let checker: Vec<RankId> = cube
            .cubes()
            .iter()
            .map(|c| RankId(((c.lattice[0] + c.lattice[1] + c.lattice[2]) % 2) as usize))
            .collect();
        let d = Distribution::from_owners(checker, 2).unwrap();
        assert!(classify_zones(&map, &d)
            .iter()
            .all(|z| *z == Zone::External));
    }

    #[test]
    fn neighbours_include_corners() {
        let cube =
            generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [3.0; 3]), 1.0, 4)).unwrap();
        let map = HaloMap::build(&cube, Layout::new(4, 2)).unwrap();
        let centre = cube.locate_cube([1.5; 3]).unwrap();
        assert_eq!(map.neighbors(centre).len(), 26);
    }

    #[test]
    fn transfer_kinds_at_level_interface() {
        let mut spec = MeshSpec::uniform(Aabb::new([0.0; 3], [2.0, 1.0, 1.0]), 1.0, 4);
        spec.n_levels = 2;
        spec.refine.push(RefineRegion {
            region: Aabb::new([1.1, 0.1, 0.1], [1.9, 0.9, 0.9]),
            level: 1,
        });
        let m = generate_mesh(&spec).unwrap();
        let map = HaloMap::build(&m, Layout::new(4, 2)).unwrap();
        let coarse = m.locate_cube([0.5; 3]).unwrap();
        assert!(map
            .entries(coarse)
            .iter()
            .any(|e| e.kind == Transfer::Average));
        let fine = m.locate_cube([1.1, 0.1, 0.1]).unwrap();
        assert!(map.entries(fine).iter().any(|e| e.kind == Transfer::Inject));
        assert!(map.entries(fine).iter().any(|e| e.kind == Transfer::Copy));
    }
}
