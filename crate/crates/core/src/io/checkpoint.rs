//! Shared-file checkpoints. Every rank compresses its own cubes, the stream
//! lengths are exchanged so all ranks agree on the byte layout, and each rank
//! writes its payloads at their offsets. Rank 0 writes the header and the
//! particle section, then seals the file with a CRC-64 over everything
//! before it.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "CUBELET\0" | version u32 | header length u64 | header | payloads | particles | crc u64
//! ```

use std::fs::{File, OpenOptions};
use std::io::Read;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use super::compress::{compress_cube, decompress_cube, Mode};
use super::wavelet;
use crate::decomp::{linear_distribution, partition_lagrangian, Distribution};
use crate::error::{Error, Result};
use crate::field::{Field, Layout, Quantity};
use crate::lagrangian::{Particle, ParticleSet};
use crate::mesh::{Aabb, BcmMesh};
use crate::parallel::RankCtx;
use crate::solver::{FlowState, Geometry};
use crate::transport::RankId;

pub const MAGIC: [u8; 8] = *b"CUBELET\0";
pub const VERSION: u32 = 1;

const CRC: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
const PARTICLE_BYTES: usize = Particle::WIRE_BYTES + 8;
const PREFIX: usize = 8 + 4 + 8;

/// How field payloads are stored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Compression {
    Lossless,
    /// Pointwise error at most `rel_tol` times the field's global range.
    Lossy {
        rel_tol: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldDescriptor {
    pub quantity: Quantity,
    pub ncomp: usize,
    /// Quantisation step, zero when lossless.
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeRecord {
    pub gid: usize,
    pub level: u8,
    pub lattice: [u32; 3],
    pub offset: u64,
    pub lengths: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub n_cells: usize,
    pub halo: usize,
    pub n_levels: u8,
    pub domain: Aabb,
    pub root_edge: f64,
    pub t: f64,
    pub step: u64,
    pub has_history: bool,
    pub fields: Vec<FieldDescriptor>,
    pub cubes: Vec<CubeRecord>,
    pub particle_offset: u64,
    pub particle_count: u64,
}

/// Scalar state stored next to the fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StateMeta {
    pub t: f64,
    pub step: u64,
    pub has_history: bool,
}

/// One rank's share of a checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub mesh: Arc<BcmMesh>,
    pub dist: Distribution,
    pub fields: Vec<Field>,
    pub sets: Vec<ParticleSet>,
    pub meta: StateMeta,
}

fn quantity_code(q: Quantity) -> u8 {
    q.tag_id() as u8
}

fn quantity_from(code: u8) -> Result<Quantity> {
    [
        Quantity::Velocity,
        Quantity::Pressure,
        Quantity::Force,
        Quantity::Scratch,
    ]
    .into_iter()
    .find(|q| q.tag_id() == u64::from(code))
    .ok_or_else(|| bad(format!("unknown quantity code {code}")))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl CheckpointHeader {
    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let u32_ = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());
        let u64_ = |b: &mut Vec<u8>, v: u64| b.extend_from_slice(&v.to_le_bytes());
        let f64_ = |b: &mut Vec<u8>, v: f64| b.extend_from_slice(&v.to_le_bytes());
        u64_(&mut b, self.cubes.len() as u64);
        u32_(&mut b, self.n_cells as u32);
        u32_(&mut b, self.halo as u32);
        b.push(self.n_levels);
        for v in self.domain.min.iter().chain(&self.domain.max) {
            f64_(&mut b, *v);
        }
        f64_(&mut b, self.root_edge);
        f64_(&mut b, self.t);
        u64_(&mut b, self.step);
        b.push(u8::from(self.has_history));
        u32_(&mut b, self.fields.len() as u32);
        for f in &self.fields {
            b.push(quantity_code(f.quantity));
            u32_(&mut b, f.ncomp as u32);
            f64_(&mut b, f.q);
        }
        for c in &self.cubes {
            u64_(&mut b, c.gid as u64);
            b.push(c.level);
            for v in c.lattice {
                u32_(&mut b, v);
            }
            u64_(&mut b, c.offset);
            for &l in &c.lengths {
                u64_(&mut b, l);
            }
        }
        u64_(&mut b, self.particle_offset);
        u64_(&mut b, self.particle_count);
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        let mut r = Cursor { b, o: 0 };
        let n_cubes = r.u64()? as usize;
        let n_cells = r.u32()? as usize;
        let halo = r.u32()? as usize;
        let n_levels = r.u8()?;
        let mut mm = [0.0; 6];
        for v in &mut mm {
            *v = r.f64()?;
        }
        let domain = Aabb::new([mm[0], mm[1], mm[2]], [mm[3], mm[4], mm[5]]);
        let root_edge = r.f64()?;
        let t = r.f64()?;
        let step = r.u64()?;
        let has_history = r.u8()? != 0;
        let nf = r.u32()? as usize;
        let mut fields = Vec::with_capacity(nf.min(64));
        for _ in 0..nf {
            fields.push(FieldDescriptor {
                quantity: quantity_from(r.u8()?)?,
                ncomp: r.u32()? as usize,
                q: r.f64()?,
            });
        }
        let mut cubes = Vec::with_capacity(n_cubes.min(b.len() / 25));
        for _ in 0..n_cubes {
            let gid = r.u64()? as usize;
            let level = r.u8()?;
            let lattice = [r.u32()?, r.u32()?, r.u32()?];
            let offset = r.u64()?;
            let lengths = (0..nf).map(|_| r.u64()).collect::<Result<_>>()?;
            cubes.push(CubeRecord {
                gid,
                level,
                lattice,
                offset,
                lengths,
            });
        }
        let particle_offset = r.u64()?;
        let particle_count = r.u64()?;
        if r.o != b.len() {
            return Err(bad("header length mismatch"));
        }
        Ok(Self {
            n_cells,
            halo,
            n_levels,
            domain,
            root_edge,
            t,
            step,
            has_history,
            fields,
            cubes,
            particle_offset,
            particle_count,
        })
    }

    /// Offsets increase, payloads are contiguous and the particle section
    /// ends exactly where the checksum begins.
    fn check(&self, data_start: u64, crc_offset: u64) -> Result<()> {
        let mut at = data_start;
        for (i, c) in self.cubes.iter().enumerate() {
            if c.gid != i {
                return Err(bad(format!("cube record {i} carries id {}", c.gid)));
            }
            if c.offset != at {
                return Err(bad(format!(
                    "cube {i} payload offset {} expected {at}",
                    c.offset
                )));
            }
            at = c
                .lengths
                .iter()
                .try_fold(at, |a, &l| a.checked_add(l))
                .ok_or_else(|| bad("length overflow"))?;
        }
        if self.particle_offset != at {
            return Err(bad("particle section misplaced"));
        }
        let end = self
            .particle_count
            .checked_mul(PARTICLE_BYTES as u64)
            .and_then(|n| n.checked_add(at));
        if end != Some(crc_offset) {
            return Err(bad("section lengths disagree with the file size"));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    o: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .b
            .get(self.o..self.o + n)
            .ok_or_else(|| bad("header truncated"))?;
        self.o += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn global_range(field: &Field, ctx: &RankCtx) -> Result<f64> {
    let (lo, hi) = field
        .cubes
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let hi = ctx.max(hi)?;
    let lo = -ctx.max(-lo)?;
    Ok(if hi > lo { hi - lo } else { 0.0 })
}

fn field_mode(compression: Compression, range: f64) -> Result<Mode> {
    match compression {
        Compression::Lossless => Ok(Mode::Lossless),
        Compression::Lossy { rel_tol } if rel_tol > 0.0 => {
            // a constant field still needs a positive step
            let tol = rel_tol * if range > 0.0 { range } else { 1.0 };
            Ok(Mode::lossy_for_tolerance(tol))
        }
        Compression::Lossy { rel_tol } => Err(Error::Config(format!(
            "lossy tolerance must be positive, got {rel_tol}"
        ))),
    }
}

/// Write a checkpoint collectively. All fields must share `layout` and the
/// local cube order of `dist`. Returns the file size in bytes.
pub fn write_checkpoint(
    path: &Path,
    ctx: &RankCtx,
    mesh: &BcmMesh,
    dist: &Distribution,
    fields: &[&Field],
    sets: &[ParticleSet],
    meta: StateMeta,
    compression: Compression,
) -> Result<u64> {
    let me = ctx.rank();
    let gids = dist.local_cubes(me);
    let mut modes = Vec::with_capacity(fields.len());
    for f in fields {
        if f.cubes.len() != gids.len() {
            return Err(bad(format!(
                "field {} holds {} cubes, rank owns {}",
                f.quantity.name(),
                f.cubes.len(),
                gids.len()
            )));
        }
        modes.push(field_mode(compression, global_range(f, ctx)?)?);
    }
    let layout = fields
        .first()
        .map_or(Layout::new(mesh.n_cells_per_edge(), 0), |f| f.layout);
    if fields.iter().any(|f| f.layout != layout) {
        return Err(bad("fields disagree on layout"));
    }
    let side = layout.side();

    let streams: Vec<Vec<Vec<u8>>> = (0..gids.len())
        .into_par_iter()
        .map(|li| {
            fields
                .iter()
                .zip(&modes)
                .map(|(f, &m)| compress_cube(&f.cubes[li], side, f.ncomp, m))
                .collect()
        })
        .collect();

    // everybody learns every stream length and derives the same layout
    let mut mine = Vec::with_capacity(gids.len() * 8 * (1 + fields.len()));
    for (&g, s) in gids.iter().zip(&streams) {
        mine.extend_from_slice(&(g as u64).to_le_bytes());
        for x in s {
            mine.extend_from_slice(&(x.len() as u64).to_le_bytes());
        }
    }
    let mut lengths = vec![Vec::new(); mesh.len()];
    for b in ctx.ep.allgather(mine)? {
        for rec in b.chunks_exact(8 * (1 + fields.len())) {
            let w = |k: usize| u64::from_le_bytes(rec[8 * k..8 * k + 8].try_into().unwrap());
            lengths[w(0) as usize] = (1..=fields.len()).map(w).collect();
        }
    }

    let mut particles: Vec<(u64, Particle)> = sets
        .iter()
        .flat_map(|s| s.iter().map(move |p| (s.cube_id as u64, *p)))
        .collect();
    let mut pbytes = Vec::with_capacity(particles.len() * PARTICLE_BYTES);
    for (c, p) in &particles {
        p.write_to(&mut pbytes);
        pbytes.extend_from_slice(&c.to_le_bytes());
    }
    particles.clear();
    for b in ctx.ep.allgather(pbytes)? {
        for rec in b.chunks_exact(PARTICLE_BYTES) {
            let c = u64::from_le_bytes(rec[Particle::WIRE_BYTES..].try_into().unwrap());
            particles.push((c, Particle::read_from(rec)));
        }
    }
    particles.sort_by_key(|(_, p)| p.global_id);

    let mut header = CheckpointHeader {
        n_cells: layout.cells,
        halo: layout.halo,
        n_levels: mesh.n_levels(),
        domain: mesh.bounding_box(),
        root_edge: mesh.root_edge(),
        t: meta.t,
        step: meta.step,
        has_history: meta.has_history,
        fields: fields
            .iter()
            .zip(&modes)
            .map(|(f, m)| FieldDescriptor {
                quantity: f.quantity,
                ncomp: f.ncomp,
                q: match m {
                    Mode::Lossless => 0.0,
                    Mode::Lossy { q } => *q,
                },
            })
            .collect(),
        cubes: mesh
            .cubes()
            .iter()
            .map(|c| CubeRecord {
                gid: c.global_id,
                level: c.level,
                lattice: c.lattice,
                offset: 0,
                lengths: lengths[c.global_id].clone(),
            })
            .collect(),
        particle_offset: 0,
        particle_count: particles.len() as u64,
    };
    let data_start = (PREFIX + header.encode().len()) as u64;
    let mut at = data_start;
    for c in &mut header.cubes {
        c.offset = at;
        at += c.lengths.iter().sum::<u64>();
    }
    header.particle_offset = at;
    let crc_offset = at + (particles.len() * PARTICLE_BYTES) as u64;

    if me == RankId(0) {
        let f = File::create(path)?;
        let hb = header.encode();
        let mut head = Vec::with_capacity(PREFIX + hb.len());
        head.extend_from_slice(&MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        head.extend_from_slice(&hb);
        f.write_all_at(&head, 0)?;
        let mut pb = Vec::with_capacity(particles.len() * PARTICLE_BYTES);
        for (c, p) in &particles {
            p.write_to(&mut pb);
            pb.extend_from_slice(&c.to_le_bytes());
        }
        f.write_all_at(&pb, header.particle_offset)?;
    }
    ctx.ep.barrier();
    if !gids.is_empty() {
        let f = OpenOptions::new().write(true).open(path)?;
        for (&g, s) in gids.iter().zip(&streams) {
            let mut off = header.cubes[g].offset;
            for x in s {
                f.write_all_at(x, off)?;
                off += x.len() as u64;
            }
        }
        f.sync_data()?;
    }
    ctx.ep.barrier();
    if me == RankId(0) {
        let mut f = OpenOptions::new().read(true).write(true).open(path)?;
        let crc = crc_of(&mut f, crc_offset)?;
        f.write_all_at(&crc.to_le_bytes(), crc_offset)?;
        f.set_len(crc_offset + 8)?;
        f.sync_all()?;
    }
    ctx.ep.barrier();
    Ok(crc_offset + 8)
}

fn crc_of(f: &mut File, len: u64) -> Result<u64> {
    let mut d = CRC.digest();
    let mut buf = vec![0u8; 1 << 20];
    let mut left = len;
    let mut at = 0;
    while left > 0 {
        let n = left.min(buf.len() as u64) as usize;
        f.read_exact_at(&mut buf[..n], at)?;
        d.update(&buf[..n]);
        left -= n as u64;
        at += n as u64;
    }
    Ok(d.finalize())
}

/// Check magic, version, checksum and section layout, and return the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = File::open(path)?;
    let size = f.metadata()?.len();
    if size < (PREFIX + 8) as u64 {
        return Err(bad("file too short"));
    }
    let mut prefix = [0u8; PREFIX];
    f.read_exact(&mut prefix)?;
    if prefix[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(prefix[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let crc_offset = size - 8;
    let mut stored = [0u8; 8];
    f.read_exact_at(&mut stored, crc_offset)?;
    if crc_of(&mut f, crc_offset)? != u64::from_le_bytes(stored) {
        return Err(bad("checksum mismatch (truncated or corrupt file)"));
    }
    let hlen = u64::from_le_bytes(prefix[12..20].try_into().unwrap());
    if hlen > crc_offset - PREFIX as u64 {
        return Err(bad("header length exceeds file"));
    }
    let mut hb = vec![0u8; hlen as usize];
    f.read_exact_at(&mut hb, PREFIX as u64)?;
    let header = CheckpointHeader::decode(&hb)?;
    header.check(PREFIX as u64 + hlen, crc_offset)?;
    Ok(header)
}

/// Read a checkpoint collectively on however many ranks `ctx` has. The
/// cubes are split with the linear distribution, and each rank reads only
/// its own payloads plus the particle section.
pub fn read_checkpoint(path: &Path, ctx: &RankCtx) -> Result<CheckpointData> {
    // rank 0 validates, then the verdict is shared so all ranks fail together
    let verdict = if ctx.rank() == RankId(0) {
        match read_header(path) {
            Ok(_) => vec![0],
            Err(e) => {
                let mut v = vec![1];
                v.extend_from_slice(e.to_string().as_bytes());
                v
            }
        }
    } else {
        Vec::new()
    };
    let verdict = ctx.ep.broadcast(RankId(0), verdict)?;
    if verdict[0] != 0 {
        return Err(bad(String::from_utf8_lossy(&verdict[1..]).into_owned()));
    }
    let f = File::open(path)?;
    let mut prefix = [0u8; PREFIX];
    f.read_exact_at(&mut prefix, 0)?;
    let hlen = u64::from_le_bytes(prefix[12..20].try_into().unwrap());
    let mut hb = vec![0u8; hlen as usize];
    f.read_exact_at(&mut hb, PREFIX as u64)?;
    let h = CheckpointHeader::decode(&hb)?;

    let leaves: Vec<(u8, [u32; 3])> = h.cubes.iter().map(|c| (c.level, c.lattice)).collect();
    let mesh = BcmMesh::from_leaves(h.domain, h.root_edge, h.n_cells, h.n_levels, &leaves)?;
    if mesh
        .cubes()
        .iter()
        .zip(&h.cubes)
        .any(|(c, r)| c.lattice != r.lattice || c.level != r.level)
    {
        return Err(bad("stored cube order differs from the rebuilt mesh"));
    }
    let dist = linear_distribution(mesh.len(), ctx.size())?;
    let gids = dist.local_cubes(ctx.rank());
    let layout = Layout::new(h.n_cells, h.halo);
    let side = layout.side();

    let mut raw = Vec::with_capacity(gids.len());
    for &g in gids {
        let c = &h.cubes[g];
        let mut buf = vec![0u8; c.lengths.iter().sum::<u64>() as usize];
        f.read_exact_at(&mut buf, c.offset)?;
        raw.push(buf);
    }
    let decoded: Vec<Vec<Vec<f64>>> = gids
        .par_iter()
        .zip(&raw)
        .map(|(&g, buf)| {
            let mut o = 0;
            h.fields
                .iter()
                .zip(&h.cubes[g].lengths)
                .map(|(d, &l)| {
                    let s = &buf[o..o + l as usize];
                    o += l as usize;
                    decompress_cube(s, side, d.ncomp)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut fields: Vec<Field> = h
        .fields
        .iter()
        .map(|d| Field::new(d.quantity, d.ncomp, layout, gids.len()))
        .collect();
    for (li, per_field) in decoded.into_iter().enumerate() {
        for (fi, values) in per_field.into_iter().enumerate() {
            fields[fi].cubes[li] = values;
        }
    }

    let mut pb = vec![0u8; h.particle_count as usize * PARTICLE_BYTES];
    f.read_exact_at(&mut pb, h.particle_offset)?;
    let mut all: Vec<ParticleSet> = (0..mesh.len()).map(ParticleSet::new).collect();
    for rec in pb.chunks_exact(PARTICLE_BYTES) {
        let c = u64::from_le_bytes(rec[Particle::WIRE_BYTES..].try_into().unwrap()) as usize;
        let p = Particle::read_from(rec);
        let set = all
            .get_mut(c)
            .ok_or_else(|| bad(format!("particle {} in unknown cube {c}", p.global_id)))?;
        if set.insert(p).is_some() {
            return Err(bad(format!("duplicate particle id {}", p.global_id)));
        }
    }
    let sets = partition_lagrangian(all, &dist).swap_remove(ctx.rank().0);

    Ok(CheckpointData {
        mesh: Arc::new(mesh),
        dist,
        fields,
        sets,
        meta: StateMeta {
            t: h.t,
            step: h.step,
            has_history: h.has_history,
        },
    })
}

/// Largest pointwise error a lossy checkpoint may introduce in a field with
/// quantisation step `q`.
pub fn lossy_error_bound(q: f64) -> f64 {
    wavelet::DETAIL_AMPLIFICATION * q / 2.0
}

/// Checkpoint a flow state: velocity, pressure and the AB2 history.
pub fn save_flow(
    path: &Path,
    ctx: &RankCtx,
    geom: &Geometry,
    st: &FlowState,
    sets: &[ParticleSet],
    compression: Compression,
) -> Result<u64> {
    let meta = StateMeta {
        t: st.t,
        step: st.step,
        has_history: st.has_history,
    };
    write_checkpoint(
        path,
        ctx,
        &geom.mesh,
        &geom.dist,
        &[&st.u, &st.p, &st.rhs_prev],
        sets,
        meta,
        compression,
    )
}

/// Inverse of [`save_flow`] on the current rank count.
pub fn load_flow(path: &Path, ctx: &RankCtx) -> Result<(Geometry, FlowState, Vec<ParticleSet>)> {
    let data = read_checkpoint(path, ctx)?;
    let mut it = data.fields.into_iter();
    let (Some(u), Some(p), Some(rhs_prev), None) = (it.next(), it.next(), it.next(), it.next())
    else {
        return Err(bad(
            "not a flow checkpoint: expected velocity, pressure and history fields",
        ));
    };
    if u.ncomp != 3 || p.ncomp != 1 || rhs_prev.ncomp != 3 {
        return Err(bad("flow fields have unexpected component counts"));
    }
    let geom = Geometry::new(data.mesh, data.dist)?;
    if u.layout != geom.layout() {
        return Err(bad("stored layout differs from the solver layout"));
    }
    let st = FlowState {
        u,
        p,
        rhs_prev,
        has_history: data.meta.has_history,
        t: data.meta.t,
        step: data.meta.step,
    };
    Ok((geom, st, data.sets))
}
