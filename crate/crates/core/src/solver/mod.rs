//! Fractional-step incompressible flow update on the cube mesh with
//! immersed-body forcing and overlapped halo exchange.

pub mod multigrid;
pub mod ops;

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::decomp::Distribution;
use crate::error::{Error, Result};
use crate::field::{Field, Layout, Quantity};
use crate::halo::{
    exchange, exchange_begin, exchange_finalize, reverse_exchange, BoundaryConditions,
    ExchangePlan, HaloMap,
};
use crate::interaction::{interpolate, spread};
use crate::lagrangian::{advect, body_velocity, migrate, MigrationStats, ParticleSet, RigidBody};
use crate::mesh::BcmMesh;
use crate::parallel::RankCtx;
use crate::transport::Endpoint;

use multigrid::{MgConfig, MgReport, Multigrid};
use ops::{divergence, divergence_rhie_chow, gradient, interior_offsets, momentum_rhs};

/// Halo width of the main fields: QUICK reaches two cells upwind.
pub const HALO: usize = 2;

/// Mesh, rank layout and the halo maps of every multigrid level.
pub struct Geometry {
    pub mesh: Arc<BcmMesh>,
    pub dist: Distribution,
    /// Level 0 is the solution layout; level m has `n / 2^m` cells.
    pub maps: Arc<Vec<HaloMap>>,
}

impl Geometry {
    pub fn new(mesh: Arc<BcmMesh>, dist: Distribution) -> Result<Self> {
        let n = mesh.n_cells_per_edge();
        let mut maps = vec![HaloMap::build(&mesh, Layout::new(n, HALO))?];
        let mut c = n / 2;
        while c >= 2 {
            maps.push(HaloMap::build(&mesh, Layout::new(c, 1))?);
            c /= 2;
        }
        Ok(Self {
            mesh,
            dist,
            maps: Arc::new(maps),
        })
    }

    /// Same mesh and halo maps under a new rank layout.
    pub fn with_distribution(&self, dist: Distribution) -> Self {
        Self {
            mesh: Arc::clone(&self.mesh),
            dist,
            maps: Arc::clone(&self.maps),
        }
    }

    pub fn layout(&self) -> Layout {
        self.maps[0].layout()
    }
}

/// Run `compute` over every local cube once `field`'s halos are valid. With
/// `overlap`, internal cubes are computed while off-rank halo data is in
/// flight and external cubes after it lands; the per-cube work is the same
/// either way, so both orders give identical results.
pub fn exchange_and<F>(
    field: &mut Field,
    plan: &ExchangePlan,
    ep: &Endpoint,
    overlap: bool,
    mut compute: F,
) -> Result<()>
where
    F: FnMut(&Field, &[usize]) -> Result<()>,
{
    if overlap {
        let pending = exchange_begin(field, plan, ep)?;
        compute(field, plan.internal_cubes())?;
        exchange_finalize(field, plan, ep, pending)?;
        compute(field, plan.external_cubes())
    } else {
        exchange(field, plan, ep)?;
        compute(field, plan.all_cubes())
    }
}

/// Apply `f` in parallel to the items at the (ascending) local indices `subset`.
pub fn par_cubes<T: Send>(
    items: &mut [T],
    subset: &[usize],
    f: impl Fn(usize, &mut T) + Sync + Send,
) {
    let mut k = 0;
    let sel: Vec<(usize, &mut T)> = items
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| {
            let hit = k < subset.len() && subset[k] == *i;
            if hit {
                k += 1;
            }
            hit
        })
        .collect();
    sel.into_par_iter().for_each(|(i, t)| f(i, t));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Ab2,
    CrankNicolson,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub rho: f64,
    pub mu: f64,
    pub dt: f64,
    pub integrator: Integrator,
    /// Switch off the convective term (pure diffusion studies).
    pub convection: bool,
    pub overlap: bool,
    pub mg: MgConfig,
    pub cn_tol: f64,
    pub cn_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            mu: 0.01,
            dt: 0.01,
            integrator: Integrator::Ab2,
            convection: true,
            overlap: true,
            mg: MgConfig::default(),
            cn_tol: 1e-10,
            cn_max_iter: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !(self.mu >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("need rho > 0, mu >= 0 and dt > 0".into()));
        }
        Ok(())
    }
}

/// Per-rank flow variables.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub u: Field,
    pub p: Field,
    /// Previous explicit right-hand side (AB2 history).
    pub rhs_prev: Field,
    pub has_history: bool,
    pub t: f64,
    pub step: u64,
}

impl FlowState {
    pub fn new(layout: Layout, n_local: usize) -> Self {
        Self {
            u: Field::new(Quantity::Velocity, 3, layout, n_local),
            p: Field::new(Quantity::Pressure, 1, layout, n_local),
            rhs_prev: Field::new(Quantity::Scratch, 3, layout, n_local),
            has_history: false,
            t: 0.0,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub t: f64,
    pub step: u64,
    /// Total fluid-to-body force `-sum F dc_volume`.
    pub force: [f64; 3],
    pub mg: MgReport,
    /// Max |grad . u*| before projection.
    pub div_star: f64,
    pub cfl: f64,
    pub cn_iterations: usize,
    pub migration: MigrationStats,
}

/// Slip speed at the particles: maximum and surface-weighted RMS.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlipStats {
    pub max: f64,
    pub rms: f64,
}

/// One rank's solver: exchange plans, multigrid hierarchy and work arrays.
pub struct Solver {
    pub cfg: SolverConfig,
    pub bc: BoundaryConditions,
    gids: Vec<usize>,
    dx: Vec<f64>,
    mesh: Arc<BcmMesh>,
    dist: Distribution,
    mg: Multigrid,
    ut: Field,
    us: Field,
    f: Field,
    work3: Field,
    rhs: Field,
    offs: Vec<usize>,
}

impl Solver {
    pub fn new(
        geom: &Geometry,
        ctx: &RankCtx,
        cfg: SolverConfig,
        bc: BoundaryConditions,
    ) -> Result<Self> {
        cfg.validate()?;
        let gids = geom.dist.local_cubes(ctx.rank()).to_vec();
        let n = gids.len();
        let lay = geom.layout();
        Ok(Self {
            cfg,
            bc,
            dx: gids
                .iter()
                .map(|&g| geom.mesh.cube(g).cell_spacing)
                .collect(),
            gids,
            mesh: Arc::clone(&geom.mesh),
            dist: geom.dist.clone(),
            mg: Multigrid::new(geom, ctx, bc, cfg.mg),
            ut: Field::new(Quantity::Velocity, 3, lay, n),
            us: Field::new(Quantity::Velocity, 3, lay, n),
            f: Field::new(Quantity::Force, 3, lay, n),
            work3: Field::new(Quantity::Scratch, 3, lay, n),
            rhs: Field::new(Quantity::Scratch, 1, lay, n),
            offs: interior_offsets(lay),
        })
    }

    pub fn plan(&self) -> &ExchangePlan {
        self.mg.finest_plan()
    }

    pub fn mesh(&self) -> &BcmMesh {
        &self.mesh
    }

    pub fn local_gids(&self) -> &[usize] {
        &self.gids
    }

    pub fn new_state(&self) -> FlowState {
        FlowState::new(self.plan().layout(), self.gids.len())
    }

    pub fn layout(&self) -> Layout {
        self.plan().layout()
    }

    pub fn set_mg_config(&mut self, mg: MgConfig) {
        self.cfg.mg = mg;
        self.mg.set_config(mg);
    }

    /// Momentum sub-step into `ut`.
    fn substep(&mut self, st: &mut FlowState, ctx: &RankCtx) -> Result<usize> {
        let cfg = self.cfg;
        let lay = self.layout();
        let v = lay.volume();
        let nu = cfg.mu / cfg.rho;
        let dt = cfg.dt;
        let cn = cfg.integrator == Integrator::CrankNicolson;
        let nu_explicit = if cn { 0.5 * nu } else { nu };
        let dx = &self.dx;
        let plan = self.mg.finest_plan();
        exchange_and(&mut st.u, plan, &ctx.ep, cfg.overlap, |u, cubes| {
            par_cubes(&mut self.work3.cubes, cubes, |li, out| {
                momentum_rhs(&u.cubes[li], lay, dx[li], nu_explicit, cfg.convection, out)
            });
            Ok(())
        })?;
        let offs = &self.offs;
        let ab2 = cfg.integrator == Integrator::Ab2 && st.has_history;
        let (u, work, prev) = (&st.u, &self.work3, &mut st.rhs_prev);
        self.ut
            .cubes
            .par_iter_mut()
            .zip(prev.cubes.par_iter_mut())
            .enumerate()
            .for_each(|(li, (ut, pr))| {
                for c in 0..3 {
                    let o = c * v;
                    for &i in offs {
                        let r = work.cubes[li][o + i];
                        let incr = if ab2 { 1.5 * r - 0.5 * pr[o + i] } else { r };
                        ut[o + i] = u.cubes[li][o + i] + dt * incr;
                        pr[o + i] = r;
                    }
                }
            });
        st.has_history = true;
        if !cn {
            return Ok(0);
        }
        // (1 + 3a) ut_i = b_i + (a/2) sum_nb ut_nb with a = nu dt / dx^2
        let b = self.ut.clone();
        let st3 = [lay.stride(0), lay.stride(1), lay.stride(2)];
        for it in 1..=cfg.cn_max_iter {
            exchange_and(&mut self.ut, plan, &ctx.ep, cfg.overlap, |ut, cubes| {
                par_cubes(&mut self.work3.cubes, cubes, |li, out| {
                    let a = nu * dt / (dx[li] * dx[li]);
                    let d = 1.0 / (1.0 + 3.0 * a);
                    for c in 0..3 {
                        let o = c * v;
                        let x = &ut.cubes[li][o..o + v];
                        for &i in offs {
                            let nb = x[i + st3[0]]
                                + x[i - st3[0]]
                                + x[i + st3[1]]
                                + x[i - st3[1]]
                                + x[i + st3[2]]
                                + x[i - st3[2]];
                            out[o + i] = (b.cubes[li][o + i] + 0.5 * a * nb) * d;
                        }
                    }
                });
                Ok(())
            })?;
            let mut inc = 0.0f64;
            let mut mag = 0.0f64;
            for (ut, w) in self.ut.cubes.iter_mut().zip(&self.work3.cubes) {
                for c in 0..3 {
                    for &i in offs {
                        let k = c * v + i;
                        inc = inc.max((w[k] - ut[k]).abs());
                        mag = mag.max(w[k].abs());
                        ut[k] = w[k];
                    }
                }
            }
            let inc = ctx.max(inc)?;
            let mag = ctx.max(mag)?;
            if inc <= cfg.cn_tol * mag.max(f64::MIN_POSITIVE) {
                return Ok(it);
            }
        }
        Err(Error::Numerics(format!(
            "Crank-Nicolson iteration did not converge in {} iterations",
            cfg.cn_max_iter
        )))
    }

    /// Direct forcing: `F = rho/dt (U_s - I[ut])`, spread and added to `ut`
    /// giving `us`. Returns the total body force.
    fn ib_force(
        &mut self,
        st: &FlowState,
        sets: &[ParticleSet],
        bodies: &[RigidBody],
        ctx: &RankCtx,
    ) -> Result<[f64; 3]> {
        let cfg = self.cfg;
        let v = self.layout().volume();
        let n_local = self.gids.len();
        if bodies.is_empty() {
            for (us, ut) in self.us.cubes.iter_mut().zip(&self.ut.cubes) {
                us.copy_from_slice(ut);
            }
            return Ok([0.0; 3]);
        }
        let mesh = &self.mesh;
        let gids = &self.gids;
        let t = st.t;
        self.f.fill(0.0);
        let mut partial = vec![[0.0f64; 3]; n_local];
        {
            let mut items: Vec<(&mut Vec<f64>, &mut [f64; 3])> =
                self.f.cubes.iter_mut().zip(partial.iter_mut()).collect();
            let plan = self.mg.finest_plan();
            exchange_and(&mut self.ut, plan, &ctx.ep, cfg.overlap, |ut, cubes| {
                par_cubes(&mut items, cubes, |li, (fc, sum)| {
                    let cube = mesh.cube(gids[li]);
                    let mut one = Field::new(Quantity::Force, 3, ut.layout, 0);
                    one.cubes.push(std::mem::take(*fc));
                    for p in sets[li].sorted() {
                        let Some(body) = bodies.iter().find(|b| b.body_id == p.body_id) else {
                            continue;
                        };
                        let mut u = [0.0; 3];
                        interpolate(ut, li, cube, p.x, &mut u);
                        let us = body_velocity(body, p.x, t);
                        let force: [f64; 3] =
                            std::array::from_fn(|a| cfg.rho / cfg.dt * (us[a] - u[a]));
                        spread(&mut one, 0, cube, p.x, &force, p.dc_volume);
                        for a in 0..3 {
                            sum[a] += force[a] * p.dc_volume;
                        }
                    }
                    **fc = one.cubes.pop().unwrap();
                });
                Ok(())
            })?;
        }
        reverse_exchange(&mut self.f, self.mg.finest_plan(), &ctx.ep)?;
        let k = cfg.dt / cfg.rho;
        let offs = &self.offs;
        self.us
            .cubes
            .par_iter_mut()
            .zip(self.ut.cubes.par_iter().zip(self.f.cubes.par_iter()))
            .for_each(|(us, (ut, f))| {
                us.copy_from_slice(ut);
                for c in 0..3 {
                    for &i in offs {
                        us[c * v + i] += k * f[c * v + i];
                    }
                }
            });
        let parts: Vec<(usize, Vec<f64>)> = gids
            .iter()
            .zip(&partial)
            .map(|(&g, s)| (g, s.to_vec()))
            .collect();
        let all = ctx.gather_by_cube_vec(&parts)?;
        let mut total = [0.0; 3];
        for (_, s) in all {
            for a in 0..3 {
                total[a] -= s[a];
            }
        }
        Ok(total)
    }

    /// The forcing stage alone, taking `st.u` as the predicted velocity:
    /// returns `u*` and the total force on the bodies.
    pub fn apply_forcing(
        &mut self,
        st: &FlowState,
        sets: &[ParticleSet],
        bodies: &[RigidBody],
        ctx: &RankCtx,
    ) -> Result<(Field, [f64; 3])> {
        for (ut, u) in self.ut.cubes.iter_mut().zip(&st.u.cubes) {
            ut.copy_from_slice(u);
        }
        let f = self.ib_force(st, sets, bodies, ctx)?;
        Ok((self.us.clone(), f))
    }

    /// Advance one time step.
    pub fn step(
        &mut self,
        st: &mut FlowState,
        sets: &mut [ParticleSet],
        bodies: &[RigidBody],
        ctx: &RankCtx,
    ) -> Result<StepReport> {
        let cfg = self.cfg;
        let lay = self.layout();
        let v = lay.volume();
        let mut report = StepReport {
            cfl: self.cfl(st, ctx)?,
            ..Default::default()
        };
        report.cn_iterations = self.substep(st, ctx)?;
        report.force = self.ib_force(st, sets, bodies, ctx)?;

        // pressure right-hand side (rho/dt) div(avg u*)
        let dx = &self.dx;
        let scale = cfg.rho / cfg.dt;
        let mut div_star = 0.0f64;
        {
            let rhs = &mut self.rhs;
            let plan = self.mg.finest_plan();
            exchange_and(&mut self.us, plan, &ctx.ep, cfg.overlap, |us, cubes| {
                par_cubes(&mut rhs.cubes, cubes, |li, out| {
                    divergence(&us.cubes[li], lay, dx[li], out);
                    for i in interior_offsets(lay) {
                        out[i] *= scale;
                    }
                });
                Ok(())
            })?;
            for a in &rhs.cubes {
                for &i in &self.offs {
                    div_star = div_star.max(a[i].abs());
                }
            }
        }
        report.div_star = ctx.max(div_star)? / scale;
        report.mg = self.mg.solve(&mut st.p, &self.rhs, ctx, cfg.overlap)?;

        // projection u = u* - (dt/rho) G p
        let k = cfg.dt / cfg.rho;
        {
            let (us, u) = (&self.us, &mut st.u);
            let offs = &self.offs;
            let plan = self.mg.finest_plan();
            exchange_and(&mut st.p, plan, &ctx.ep, cfg.overlap, |p, cubes| {
                par_cubes(&mut u.cubes, cubes, |li, out| {
                    let mut g = vec![0.0; 3 * v];
                    gradient(&p.cubes[li], lay, dx[li], &mut g);
                    for c in 0..3 {
                        for &i in offs {
                            out[c * v + i] = us.cubes[li][c * v + i] - k * g[c * v + i];
                        }
                    }
                });
                Ok(())
            })?;
        }
        st.t = (st.step + 1) as f64 * cfg.dt;
        st.step += 1;

        if !bodies.is_empty() {
            advect(sets, bodies, cfg.dt, st.t);
            report.migration = migrate(sets, &self.mesh, &self.dist, &ctx.ep, st.step)?;
        }
        report.t = st.t;
        report.step = st.step;
        Ok(report)
    }

    /// Largest `|u_a| dt / dx` over local cubes, reduced globally.
    pub fn cfl(&self, st: &FlowState, ctx: &RankCtx) -> Result<f64> {
        let v = self.layout().volume();
        let mut m = 0.0f64;
        for (li, a) in st.u.cubes.iter().enumerate() {
            let s = self.cfg.dt / self.dx[li];
            for c in 0..3 {
                for &i in &self.offs {
                    m = m.max(a[c * v + i].abs() * s);
                }
            }
        }
        ctx.max(m)
    }

    /// Max |Rhie-Chow divergence| of the current velocity (halo of `u` is
    /// refreshed; `p` halo must be valid, as it is after a step).
    pub fn divergence_max(&self, st: &mut FlowState, ctx: &RankCtx) -> Result<f64> {
        let lay = self.layout();
        exchange(&mut st.u, self.plan(), &ctx.ep)?;
        let k = self.cfg.dt / self.cfg.rho;
        let mut out = vec![0.0; lay.volume()];
        let mut m = 0.0f64;
        for li in 0..self.gids.len() {
            divergence_rhie_chow(
                &st.u.cubes[li],
                &st.p.cubes[li],
                lay,
                self.dx[li],
                k,
                &mut out,
            );
            for &i in &self.offs {
                m = m.max(out[i].abs());
            }
        }
        ctx.max(m)
    }

    /// Slip `|I[u] - U_s|` over all particles at time `st.t`.
    pub fn slip(
        &self,
        st: &mut FlowState,
        sets: &[ParticleSet],
        bodies: &[RigidBody],
        ctx: &RankCtx,
    ) -> Result<SlipStats> {
        exchange(&mut st.u, self.plan(), &ctx.ep)?;
        let mut max = 0.0f64;
        let mut parts = Vec::with_capacity(sets.len());
        for (li, s) in sets.iter().enumerate() {
            let cube = self.mesh.cube(self.gids[li]);
            let (mut sq, mut area) = (0.0, 0.0);
            for p in s.sorted() {
                if let Some(b) = bodies.iter().find(|b| b.body_id == p.body_id) {
                    let mut u = [0.0; 3];
                    interpolate(&st.u, li, cube, p.x, &mut u);
                    let us = body_velocity(b, p.x, st.t);
                    let d2: f64 = (0..3).map(|a| (u[a] - us[a]).powi(2)).sum();
                    max = max.max(d2.sqrt());
                    sq += d2 * p.dc_volume;
                    area += p.dc_volume;
                }
            }
            parts.push((self.gids[li], vec![sq, area]));
        }
        let all = ctx.gather_by_cube_vec(&parts)?;
        let (sq, area) = all
            .iter()
            .fold((0.0, 0.0), |(s, a), (_, v)| (s + v[0], a + v[1]));
        Ok(SlipStats {
            max: ctx.max(max)?,
            rms: if area > 0.0 { (sq / area).sqrt() } else { 0.0 },
        })
    }

    /// Volume-weighted kinetic energy `sum |u|^2 / 2 dV`.
    pub fn kinetic_energy(&self, st: &FlowState, ctx: &RankCtx) -> Result<f64> {
        let v = self.layout().volume();
        let parts: Vec<(usize, f64)> =
            st.u.cubes
                .iter()
                .enumerate()
                .map(|(li, a)| {
                    let mut s = 0.0;
                    for c in 0..3 {
                        for &i in &self.offs {
                            s += a[c * v + i] * a[c * v + i];
                        }
                    }
                    (self.gids[li], 0.5 * s * self.dx[li].powi(3))
                })
                .collect();
        ctx.sum_by_cube(&parts)
    }
}

/// Force history writer: `t, Fx, Fy, Fz` and the force normalised by the
/// running mean axial force.
pub struct ForceHistory {
    sum_fx: f64,
    count: u64,
}

impl Default for ForceHistory {
    fn default() -> Self {
        Self::new()
    }
}

impl ForceHistory {
    pub const HEADER: &'static str = "t,Fx,Fy,Fz,Fx_norm,Fy_norm,Fz_norm";

    pub fn new() -> Self {
        Self {
            sum_fx: 0.0,
            count: 0,
        }
    }

    pub fn record(
        &mut self,
        out: &mut impl Write,
        t: f64,
        f: [f64; 3],
    ) -> std::io::Result<[f64; 3]> {
        self.sum_fx += f[0];
        self.count += 1;
        let avg = self.sum_fx / self.count as f64;
        let norm = if avg != 0.0 {
            f.map(|x| x / avg)
        } else {
            [0.0; 3]
        };
        writeln!(
            out,
            "{t:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            f[0], f[1], f[2], norm[0], norm[1], norm[2]
        )?;
        Ok(norm)
    }
}
