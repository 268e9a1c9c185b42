//! Predictive dynamic load balancing over the dual graph of the cube mesh:
//! workload estimate, SFC bisection with border refinement, greedy
//! bipartite remapping and data redistribution.

use std::collections::BTreeMap;

use crate::decomp::Distribution;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::lagrangian::{Particle, ParticleSet};
use crate::mesh::{BcmMesh, FaceNeighbors};
use crate::parallel::RankCtx;
use crate::solver::{FlowState, Geometry};
use crate::transport::{make_tag, tag_kind, RankId};

/// Fixed-point scale of all weights; ratios are compared on integers.
pub const WEIGHT_SCALE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceConfig {
    /// Rebalance when `W_max / W_avg > kappa`.
    pub kappa: f64,
    /// Cost of one particle relative to one cell.
    pub gamma: f64,
    /// Halo layers exchanged across a face.
    pub halo_width: usize,
    /// Steps between imbalance checks.
    pub every: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            kappa: 1.04,
            gamma: 3.0,
            halo_width: crate::solver::HALO,
            every: 100,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 1.0) || !(self.gamma > 0.0) || self.every == 0 {
            return Err(Error::Config(
                "need kappa > 1, gamma > 0 and a positive check interval".into(),
            ));
        }
        Ok(())
    }

    fn kappa_ppm(&self) -> u128 {
        (self.kappa * 1e6).round() as u128
    }
}

/// Weighted dual graph: one node per cube, edges between face neighbours.
/// All weights carry the factor [`WEIGHT_SCALE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualGraph {
    /// Cell count per cube (`w^{v1}`).
    pub cells: Vec<u64>,
    /// Particle cost per cube (`w^{v2} = gamma n_particles`).
    pub particles: Vec<u64>,
    /// Symmetric adjacency `(neighbour, halo cells across the face)`.
    pub edges: Vec<Vec<(usize, u64)>>,
}

impl DualGraph {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Total node weight: vertex weights plus every incident edge weight.
    pub fn node_weight(&self, i: usize) -> u64 {
        self.cells[i] + self.particles[i] + self.edges[i].iter().map(|e| e.1).sum::<u64>()
    }

    pub fn node_weights(&self) -> Vec<u64> {
        (0..self.len()).map(|i| self.node_weight(i)).collect()
    }

    /// Sum of edge weights between different parts.
    pub fn edge_cut(&self, part: &[usize]) -> u64 {
        let mut cut = 0;
        for (i, adj) in self.edges.iter().enumerate() {
            for &(j, w) in adj {
                if i < j && part[i] != part[j] {
                    cut += w;
                }
            }
        }
        cut
    }
}

/// Build the workload graph. `particle_counts` is indexed by global cube id.
pub fn build_graph(
    mesh: &BcmMesh,
    particle_counts: &[usize],
    cfg: &BalanceConfig,
) -> Result<DualGraph> {
    if particle_counts.len() != mesh.len() {
        return Err(Error::OutOfRange {
            index: particle_counts.len(),
            len: mesh.len(),
        });
    }
    let n = mesh.n_cells_per_edge() as u64;
    let gamma = (cfg.gamma * WEIGHT_SCALE as f64).round() as u64;
    // same-level faces and the fine side of a level jump both exchange a
    // full n x n x halo slab at the finer resolution
    let face = n * n * cfg.halo_width as u64 * WEIGHT_SCALE;
    let mut edges: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); mesh.len()];
    for c in mesh.cubes() {
        for f in &c.faces {
            let others: Vec<usize> = match *f {
                FaceNeighbors::Boundary => continue,
                FaceNeighbors::Same(o) | FaceNeighbors::Coarser(o) => vec![o],
                FaceNeighbors::Finer(fs) => fs.to_vec(),
            };
            for o in others {
                edges[c.global_id].insert(o, face);
                edges[o].insert(c.global_id, face);
            }
        }
    }
    Ok(DualGraph {
        cells: vec![n * n * n * WEIGHT_SCALE; mesh.len()],
        particles: particle_counts.iter().map(|&k| k as u64 * gamma).collect(),
        edges: edges.into_iter().map(|m| m.into_iter().collect()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Imbalance {
    /// Workload per rank (scaled).
    pub per_rank: Vec<u64>,
    /// `W_max / W_avg`; empty ranks count toward the average.
    pub ratio: f64,
}

impl Imbalance {
    pub fn max(&self) -> u64 {
        self.per_rank.iter().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.per_rank.iter().sum()
    }

    /// Exact integer test of `W_max / W_avg > kappa`.
    pub fn exceeds(&self, cfg: &BalanceConfig) -> bool {
        let p = self.per_rank.len() as u128;
        self.max() as u128 * p * 1_000_000 > cfg.kappa_ppm() * self.total() as u128
    }
}

/// Workload per part under `part` (values in `0..k`).
pub fn estimate_imbalance(graph: &DualGraph, part: &[usize], k: usize) -> Imbalance {
    let mut w = vec![0u64; k];
    for (i, &p) in part.iter().enumerate() {
        w[p] += graph.node_weight(i);
    }
    let total: u64 = w.iter().sum();
    let max = w.iter().copied().max().unwrap_or(0);
    let ratio = if total == 0 {
        1.0
    } else {
        max as f64 * k as f64 / total as f64
    };
    Imbalance { per_rank: w, ratio }
}

/// Split the nodes (in id order, which is the Z-order) into `k` parts.
/// Recursive bisection of the weight prefix is followed by a refinement
/// pass that moves border nodes off the heaviest part.
pub fn partition_graph(graph: &DualGraph, k: usize) -> Result<Vec<usize>> {
    let n = graph.len();
    if k == 0 || k > n {
        return Err(Error::Partition(format!(
            "cannot split {n} cubes into {k} parts"
        )));
    }
    let w = graph.node_weights();
    let mut part = vec![0usize; n];
    bisect(&w, 0, n, 0, k, &mut part);
    refine(graph, &w, k, &mut part);
    Ok(part)
}

fn bisect(w: &[u64], lo: usize, hi: usize, first: usize, k: usize, part: &mut [usize]) {
    if k == 1 {
        part[lo..hi].iter_mut().for_each(|p| *p = first);
        return;
    }
    let k1 = k / 2;
    let k2 = k - k1;
    let total: u128 = w[lo..hi].iter().map(|&x| x as u128).sum();
    // left side gets k1/k of the weight; keep enough nodes for every part
    let mut best = lo + k1;
    let mut best_cost = u128::MAX;
    let mut prefix: u128 = w[lo..lo + k1 - 1].iter().map(|&x| x as u128).sum();
    for s in lo + k1..=hi - k2 {
        prefix += w[s - 1] as u128;
        // max of the two per-part averages, scaled by k1 k2
        let cost = (prefix * k2 as u128).max((total - prefix) * k1 as u128);
        if cost < best_cost {
            best_cost = cost;
            best = s;
        }
    }
    bisect(w, lo, best, first, k1, part);
    bisect(w, best, hi, first + k1, k2, part);
}

/// Largest `|W(q) - W_avg|`, scaled by `k` to stay integral.
fn max_deviation(loads: &[u64]) -> u128 {
    let k = loads.len() as i128;
    let total: i128 = loads.iter().map(|&x| x as i128).sum();
    loads
        .iter()
        .map(|&x| (x as i128 * k - total).unsigned_abs())
        .max()
        .unwrap_or(0)
}

fn refine(graph: &DualGraph, w: &[u64], k: usize, part: &mut [usize]) {
    let n = graph.len();
    let mut loads = vec![0u64; k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        loads[part[i]] += w[i];
        counts[part[i]] += 1;
    }
    let cut0 = graph.edge_cut(part);
    let max_edge = graph.edges.iter().flatten().map(|e| e.1).max().unwrap_or(0);
    // allow 10% growth of the cut, but never less than one face, so small
    // graphs can still shed a node
    let cap = cut0 + (cut0 / 10).max(max_edge);
    let mut cut = cut0;
    for _ in 0..4 * n {
        let dev = max_deviation(&loads);
        let heavy = (0..k)
            .max_by_key(|&q| (loads[q], std::cmp::Reverse(q)))
            .unwrap();
        if counts[heavy] <= 1 {
            break;
        }
        // best (deviation, cut, node, target) over border nodes of the heaviest part
        let mut best: Option<(u128, u64, usize, usize)> = None;
        for i in (0..n).filter(|&i| part[i] == heavy) {
            let mut targets: Vec<usize> = graph.edges[i]
                .iter()
                .map(|&(j, _)| part[j])
                .filter(|&q| q != heavy)
                .collect();
            targets.sort_unstable();
            targets.dedup();
            for q in targets {
                loads[heavy] -= w[i];
                loads[q] += w[i];
                let d = max_deviation(&loads);
                loads[heavy] += w[i];
                loads[q] -= w[i];
                let mut c = cut;
                for &(j, ew) in &graph.edges[i] {
                    if part[j] == heavy {
                        c += ew;
                    } else if part[j] == q {
                        c -= ew;
                    }
                }
                if d < dev && c <= cap && best.is_none_or(|b| (d, c) < (b.0, b.1)) {
                    best = Some((d, c, i, q));
                }
            }
        }
        let Some((_, c, i, q)) = best else {
            break;
        };
        loads[heavy] -= w[i];
        loads[q] += w[i];
        counts[heavy] -= 1;
        counts[q] += 1;
        part[i] = q;
        cut = c;
    }
}

/// `S[r][q]`: cell weight of the cubes in new part `q` currently on rank `r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityMatrix {
    pub size: usize,
    pub data: Vec<u64>,
}

impl SimilarityMatrix {
    pub fn get(&self, old: usize, new: usize) -> u64 {
        self.data[old * self.size + new]
    }
}

pub fn construct_similarity(
    graph: &DualGraph,
    old: &[RankId],
    new: &[usize],
    p: usize,
) -> SimilarityMatrix {
    let mut data = vec![0u64; p * p];
    for i in 0..graph.len() {
        data[old[i].0 * p + new[i]] += graph.cells[i];
    }
    SimilarityMatrix { size: p, data }
}

/// Greedy maximum-weight matching: entries in descending weight order are
/// accepted when both endpoints are free. Returns the rank for each new part.
pub fn remap_mwbg(s: &SimilarityMatrix) -> Vec<RankId> {
    let p = s.size;
    let mut order: Vec<(u64, usize, usize)> = (0..p)
        .flat_map(|r| (0..p).map(move |q| (s.get(r, q), r, q)))
        .collect();
    order.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut rank_of = vec![usize::MAX; p];
    let mut taken = vec![false; p];
    for (_, r, q) in order {
        if !taken[r] && rank_of[q] == usize::MAX {
            taken[r] = true;
            rank_of[q] = r;
        }
    }
    rank_of.into_iter().map(RankId).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RedistributeStats {
    pub cubes_sent: usize,
    pub cubes_received: usize,
    pub bytes_sent: usize,
}

/// Move cube data to the owners given by `new`. Every field and `sets`
/// must hold this rank's cubes in `old` local order; on return they follow
/// `new` local order. Collective over all ranks.
pub fn redistribute(
    ctx: &RankCtx,
    old: &Distribution,
    new: &Distribution,
    fields: &mut [&mut Field],
    sets: &mut Vec<ParticleSet>,
    epoch: u64,
) -> Result<RedistributeStats> {
    let me = ctx.rank();
    let p = ctx.size();
    if old.n_cubes() != new.n_cubes() || old.n_ranks() != p || new.n_ranks() != p {
        return Err(Error::Config(
            "distributions do not match the rank layout".into(),
        ));
    }
    for f in fields.iter() {
        if f.in_flight.is_some() {
            return Err(Error::ExchangeInFlight(f.quantity.name()));
        }
    }
    let mine = old.local_cubes(me);
    let mut outgoing: Vec<Vec<u8>> = vec![Vec::new(); p];
    let mut stats = RedistributeStats::default();
    for (li, &g) in mine.iter().enumerate() {
        let dest = new.owner(g);
        if dest == me {
            continue;
        }
        let buf = &mut outgoing[dest.0];
        buf.extend_from_slice(&(g as u64).to_le_bytes());
        for f in fields.iter() {
            let a = &f.cubes[li];
            buf.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let members = sets[li].sorted();
        buf.extend_from_slice(&(members.len() as u64).to_le_bytes());
        for m in &members {
            m.write_to(buf);
        }
        stats.cubes_sent += 1;
    }
    let tag = make_tag(tag_kind::REDISTRIBUTE, 0, epoch);
    let sources: Vec<usize> = (0..p)
        .filter(|&r| r != me.0 && new.local_cubes(me).iter().any(|&g| old.owner(g).0 == r))
        .collect();
    let mut sends = Vec::new();
    for (r, buf) in outgoing.into_iter().enumerate() {
        if !buf.is_empty() {
            stats.bytes_sent += buf.len();
            sends.push(ctx.ep.post_send(RankId(r), tag, buf)?);
        }
    }
    let mut recvs = Vec::with_capacity(sources.len());
    for &r in &sources {
        recvs.push(ctx.ep.post_recv(RankId(r), tag)?);
    }
    ctx.ep.wait_all(&mut recvs)?;
    ctx.ep.wait_all(&mut sends)?;

    let mut arrived: BTreeMap<usize, (Vec<Vec<f64>>, ParticleSet)> = BTreeMap::new();
    for h in &mut recvs {
        let b = h.take_payload().unwrap_or_default();
        let rd = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap()) as usize;
        let mut o = 0;
        while o < b.len() {
            let g = rd(o);
            o += 8;
            let mut arrays = Vec::with_capacity(fields.len());
            for _ in 0..fields.len() {
                let len = rd(o);
                o += 8;
                arrays.push(
                    (0..len)
                        .map(|k| {
                            f64::from_le_bytes(b[o + 8 * k..o + 8 * k + 8].try_into().unwrap())
                        })
                        .collect(),
                );
                o += 8 * len;
            }
            let np = rd(o);
            o += 8;
            let mut set = ParticleSet::new(g);
            for _ in 0..np {
                set.insert(Particle::read_from(&b[o..o + Particle::WIRE_BYTES]));
                o += Particle::WIRE_BYTES;
            }
            arrived.insert(g, (arrays, set));
        }
    }
    stats.cubes_received = arrived.len();

    let mut kept: BTreeMap<usize, usize> = BTreeMap::new();
    for (li, &g) in mine.iter().enumerate() {
        if new.owner(g) == me {
            kept.insert(g, li);
        }
    }
    let mut old_cubes: Vec<Vec<Vec<f64>>> = fields
        .iter_mut()
        .map(|f| std::mem::take(&mut f.cubes))
        .collect();
    let mut old_sets = std::mem::take(sets);
    for &g in new.local_cubes(me) {
        if let Some(&li) = kept.get(&g) {
            for (f, oc) in fields.iter_mut().zip(&mut old_cubes) {
                f.cubes.push(std::mem::take(&mut oc[li]));
            }
            sets.push(std::mem::replace(&mut old_sets[li], ParticleSet::new(g)));
        } else {
            let (arrays, set) = arrived
                .remove(&g)
                .ok_or_else(|| Error::Partition(format!("cube {g} did not arrive")))?;
            for (f, a) in fields.iter_mut().zip(arrays) {
                f.cubes.push(a);
            }
            sets.push(set);
        }
    }
    Ok(stats)
}

/// What a balancing decision found and did.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceOutcome {
    pub before: Imbalance,
    pub after: Imbalance,
    pub cut_before: u64,
    pub cut_after: u64,
    pub cubes_moved: usize,
    /// `None` when the imbalance stayed within `kappa`.
    pub distribution: Option<Distribution>,
}

/// Decide on a new distribution from global particle counts. Deterministic,
/// so every rank reaches the same answer without a broadcast.
pub fn plan_rebalance(
    mesh: &BcmMesh,
    dist: &Distribution,
    particle_counts: &[usize],
    cfg: &BalanceConfig,
) -> Result<BalanceOutcome> {
    cfg.validate()?;
    let graph = build_graph(mesh, particle_counts, cfg)?;
    let p = dist.n_ranks();
    let old: Vec<usize> = dist.owners().iter().map(|r| r.0).collect();
    let before = estimate_imbalance(&graph, &old, p);
    let cut_before = graph.edge_cut(&old);
    if !before.exceeds(cfg) || graph.len() < p {
        return Ok(BalanceOutcome {
            after: before.clone(),
            before,
            cut_before,
            cut_after: cut_before,
            cubes_moved: 0,
            distribution: None,
        });
    }
    let parts = partition_graph(&graph, p)?;
    let s = construct_similarity(&graph, dist.owners(), &parts, p);
    let rank_of = remap_mwbg(&s);
    let owners: Vec<RankId> = parts.iter().map(|&q| rank_of[q]).collect();
    let new_part: Vec<usize> = owners.iter().map(|r| r.0).collect();
    let after = estimate_imbalance(&graph, &new_part, p);
    let cubes_moved = owners
        .iter()
        .zip(dist.owners())
        .filter(|(a, b)| a != b)
        .count();
    Ok(BalanceOutcome {
        before,
        after,
        cut_before,
        cut_after: graph.edge_cut(&new_part),
        cubes_moved,
        distribution: Some(Distribution::from_owners(owners, p)?),
    })
}

/// Collective check-and-act: when the workload is out of balance, move
/// `st` and `sets` to the new layout. The caller rebuilds its solver on
/// `geom.with_distribution(..)` when the outcome carries a distribution.
pub fn rebalance(
    ctx: &RankCtx,
    geom: &Geometry,
    st: &mut FlowState,
    sets: &mut Vec<ParticleSet>,
    cfg: &BalanceConfig,
) -> Result<(BalanceOutcome, RedistributeStats)> {
    let counts = global_particle_counts(ctx, geom.mesh.len(), sets)?;
    let outcome = plan_rebalance(&geom.mesh, &geom.dist, &counts, cfg)?;
    let mut stats = RedistributeStats::default();
    if let Some(new) = &outcome.distribution {
        let mut fields = [&mut st.u, &mut st.p, &mut st.rhs_prev];
        stats = redistribute(ctx, &geom.dist, new, &mut fields, sets, st.step)?;
    }
    Ok((outcome, stats))
}

/// Global particle count per cube from each rank's local sets.
pub fn global_particle_counts(
    ctx: &RankCtx,
    n_cubes: usize,
    sets: &[ParticleSet],
) -> Result<Vec<usize>> {
    let parts: Vec<(usize, f64)> = sets.iter().map(|s| (s.cube_id, s.len() as f64)).collect();
    let mut counts = vec![0usize; n_cubes];
    for (g, v) in ctx.gather_by_cube(&parts)? {
        counts[g] = v as usize;
    }
    Ok(counts)
}
