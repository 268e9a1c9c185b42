//! Per-cube geometric multigrid for the pressure Poisson equation: each cube
//! coarsens independently down to 2^3 cells, damped Jacobi smoothing with a
//! halo exchange per sweep, conjugate gradients on the coarsest level.
//! The capped coarse solve leaves slow global modes on large meshes, so by
//! default the V-cycle serves as a preconditioner for flexible GMRES.

use rayon::prelude::*;

use super::ops::{interior_offsets, laplacian};
use super::{exchange_and, par_cubes, Geometry};
use crate::error::Result;
use crate::field::{Field, Layout, Quantity};
use crate::halo::{exchange, BoundaryConditions, ExchangePlan};

use crate::parallel::RankCtx;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MgConfig {
    /// Target relative residual (volume-weighted 2-norm).
    pub tol: f64,
    pub max_cycles: usize,
    pub pre_sweeps: usize,
    pub post_sweeps: usize,
    pub omega: f64,
    pub coarse_iters: usize,
    /// Accelerate the V-cycles with flexible GMRES; each Krylov iteration
    /// costs one V-cycle. Plain V-cycle iteration when zero.
    pub krylov_restart: usize,
}

impl Default for MgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_cycles: 50,
            pre_sweeps: 3,
            post_sweeps: 3,
            omega: 6.0 / 7.0,
            coarse_iters: 10,
            krylov_restart: 12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MgReport {
    pub cycles: usize,
    pub rel_residual: f64,
    pub converged: bool,
    /// Residual reduction of each V-cycle.
    pub factors: Vec<f64>,
}

struct Level {
    lay: Layout,
    plan: ExchangePlan,
    /// Correction (coarse levels) or unused (finest, which works on `p`).
    x: Field,
    b: Field,
    r: Field,
    tmp: Vec<Vec<f64>>,
    dx: Vec<f64>,
}

pub struct Multigrid {
    /// The V-cycle stencils reach one cell, so level plans fill one halo
    /// layer; this one fills all of them for the rest of the solver.
    full: ExchangePlan,
    levels: Vec<Level>,
    gids: Vec<usize>,
    cfg: MgConfig,
    /// No Dirichlet face: the solution is defined up to a constant.
    singular: bool,
}

fn scaled_dx(geom: &Geometry, gids: &[usize], m: usize) -> Vec<f64> {
    gids.iter()
        .map(|&g| geom.mesh.cube(g).cell_spacing * f64::from(1u32 << m))
        .collect()
}

impl Multigrid {
    pub fn new(geom: &Geometry, ctx: &RankCtx, bc: BoundaryConditions, cfg: MgConfig) -> Self {
        let gids = geom.dist.local_cubes(ctx.rank()).to_vec();
        let n_local = gids.len();
        let levels = geom
            .maps
            .iter()
            .enumerate()
            .map(|(m, map)| {
                let lay = map.layout();
                Level {
                    lay,
                    plan: ExchangePlan::with_depth(map, &geom.dist, ctx.rank(), bc, 1),
                    x: Field::new(Quantity::Scratch, 1, lay, if m == 0 { 0 } else { n_local }),
                    b: Field::new(Quantity::Scratch, 1, lay, n_local),
                    r: Field::new(Quantity::Scratch, 1, lay, n_local),
                    tmp: vec![vec![0.0; lay.volume()]; n_local],
                    dx: scaled_dx(geom, &gids, m),
                }
            })
            .collect();
        Self {
            full: ExchangePlan::new(&geom.maps[0], &geom.dist, ctx.rank(), bc),
            levels,
            gids,
            cfg,
            singular: !bc.has_outflow(),
        }
    }

    pub fn config(&self) -> &MgConfig {
        &self.cfg
    }

    pub fn set_config(&mut self, cfg: MgConfig) {
        self.cfg = cfg;
    }

    /// Finest-level plan filling the whole halo.
    pub fn finest_plan(&self) -> &ExchangePlan {
        &self.full
    }

    /// Deterministic global sums of per-cube values.
    fn global_sums(&self, ctx: &RankCtx, per_cube: Vec<Vec<f64>>) -> Result<Vec<f64>> {
        let width = per_cube.first().map_or(0, Vec::len);
        let parts: Vec<(usize, Vec<f64>)> = self.gids.iter().copied().zip(per_cube).collect();
        let all = ctx.gather_by_cube_vec(&parts)?;
        let mut out = vec![0.0; width.max(all.first().map_or(0, |p| p.1.len()))];
        for (_, v) in all {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        Ok(out)
    }

    fn weighted(&self, m: usize, a: &Field, b: Option<&Field>) -> Vec<Vec<f64>> {
        let lvl = &self.levels[m];
        let offs = interior_offsets(lvl.lay);
        (0..self.gids.len())
            .into_par_iter()
            .map(|li| {
                let dv = lvl.dx[li].powi(3);
                let (x, y) = (&a.cubes[li], b.map(|f| &f.cubes[li]));
                let mut s = 0.0;
                let mut vol = 0.0;
                for &i in &offs {
                    s += x[i] * y.map_or(1.0, |y| y[i]);
                    vol += 1.0;
                }
                vec![s * dv, vol * dv]
            })
            .collect()
    }

    /// Solve `L p = rhs` from the current `p` (warm start). `p` has the
    /// finest layout; ghosts follow pressure boundary conditions.
    pub fn solve(
        &mut self,
        p: &mut Field,
        rhs: &Field,
        ctx: &RankCtx,
        overlap: bool,
    ) -> Result<MgReport> {
        let n_local = self.gids.len();
        {
            let l0 = &mut self.levels[0];
            for li in 0..n_local {
                l0.b.cubes[li].copy_from_slice(&rhs.cubes[li]);
            }
        }
        if self.singular {
            let lay0 = self.levels[0].lay;
            let mut b = std::mem::replace(
                &mut self.levels[0].b,
                Field::new(Quantity::Scratch, 1, lay0, 0),
            );
            self.remove_mean(0, &mut b, ctx)?;
            self.levels[0].b = b;
        }
        let bb = self.global_sums(
            ctx,
            self.weighted(0, &self.levels[0].b, Some(&self.levels[0].b)),
        )?[0];
        let bnorm = bb.sqrt();
        let mut report = MgReport::default();
        if bnorm == 0.0 {
            p.fill(0.0);
            report.converged = true;
            return Ok(report);
        }
        let mut rel = self.residual_norm(0, p, ctx, overlap)? / bnorm;
        report.rel_residual = rel;
        if self.cfg.krylov_restart > 0 {
            while rel > self.cfg.tol && report.cycles < self.cfg.max_cycles {
                self.fgmres_cycle(p, ctx, overlap, bnorm, rel, &mut report)?;
                rel = self.residual_norm(0, p, ctx, overlap)? / bnorm;
            }
        }
        while rel > self.cfg.tol && report.cycles < self.cfg.max_cycles {
            self.vcycle(p, ctx, overlap)?;
            let new = self.residual_norm(0, p, ctx, overlap)? / bnorm;
            report.factors.push(new / rel);
            rel = new;
            report.cycles += 1;
        }
        report.rel_residual = rel;
        report.converged = rel <= self.cfg.tol;
        if self.singular {
            self.remove_mean(0, p, ctx)?;
        }
        Ok(report)
    }

    /// One restart cycle of right-preconditioned flexible GMRES in the
    /// volume-weighted inner product, starting from the residual already in
    /// `levels[0].r`. Appends one factor per V-cycle spent.
    fn fgmres_cycle(
        &mut self,
        p: &mut Field,
        ctx: &RankCtx,
        overlap: bool,
        bnorm: f64,
        rel0: f64,
        report: &mut MgReport,
    ) -> Result<()> {
        let m = self.cfg.krylov_restart;
        let lay = self.levels[0].lay;
        let offs = interior_offsets(lay);
        let nc = offs.len();
        let n_local = self.gids.len();
        let w3: Vec<f64> = self.levels[0].dx.iter().map(|d| d.powi(3)).collect();
        let flatten = |f: &Field| -> Vec<f64> {
            let mut v = Vec::with_capacity(n_local * nc);
            for a in &f.cubes {
                v.extend(offs.iter().map(|&i| a[i]));
            }
            v
        };
        let beta = rel0 * bnorm;
        let mut basis = vec![flatten(&self.levels[0].r)];
        basis[0].iter_mut().for_each(|x| *x /= beta);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let b_saved = std::mem::replace(
            &mut self.levels[0].b,
            Field::new(Quantity::Scratch, 1, lay, 0),
        );
        let mut prev = beta;
        let mut k = 0;
        while k < m && report.cycles < self.cfg.max_cycles {
            // z = M v_k: one V-cycle on L z = v_k from zero
            let mut vb = Field::new(Quantity::Scratch, 1, lay, n_local);
            for (li, a) in vb.cubes.iter_mut().enumerate() {
                for (j, &i) in offs.iter().enumerate() {
                    a[i] = basis[k][li * nc + j];
                }
            }
            self.levels[0].b = vb;
            let mut z = Field::new(Quantity::Pressure, 1, lay, n_local);
            self.vcycle(&mut z, ctx, overlap)?;
            report.cycles += 1;
            let Level { tmp, plan, dx, .. } = &mut self.levels[0];
            let dx = &*dx;
            exchange_and(&mut z, plan, &ctx.ep, overlap, |z, cubes| {
                par_cubes(tmp, cubes, |li, out| {
                    laplacian(&z.cubes[li], lay, dx[li], out)
                });
                Ok(())
            })?;
            let mut w = Vec::with_capacity(n_local * nc);
            for t in self.levels[0].tmp.iter() {
                w.extend(offs.iter().map(|&i| t[i]));
            }
            zs.push(flatten(&z));
            // classical Gram-Schmidt, twice, one reduction per pass
            for _ in 0..2 {
                let dots = self.dots(ctx, &basis, &w, &w3, nc)?;
                for (j, d) in dots.iter().enumerate() {
                    h[j][k] += d;
                    for (x, v) in w.iter_mut().zip(&basis[j]) {
                        *x -= d * v;
                    }
                }
            }
            let hn = self.dots(ctx, std::slice::from_ref(&w), &w, &w3, nc)?[0].sqrt();
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let r = h[k][k].hypot(hn);
            (cs[k], sn[k]) = if r > 0.0 {
                (h[k][k] / r, hn / r)
            } else {
                (1.0, 0.0)
            };
            h[k][k] = r;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            let est = g[k + 1].abs();
            report.factors.push(est / prev);
            prev = est;
            k += 1;
            if est <= self.cfg.tol * bnorm || !(hn > 0.0) {
                break;
            }
            w.iter_mut().for_each(|x| *x /= hn);
            basis.push(w);
        }
        self.levels[0].b = b_saved;
        // back substitution and update
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| h[i][j] * y[j]).sum();
            y[i] = if h[i][i] != 0.0 {
                (g[i] - s) / h[i][i]
            } else {
                0.0
            };
        }
        for (li, a) in p.cubes.iter_mut().enumerate() {
            for (j, &i) in offs.iter().enumerate() {
                let mut s = 0.0;
                for (yk, z) in y.iter().zip(&zs) {
                    s += yk * z[li * nc + j];
                }
                a[i] += s;
            }
        }
        Ok(())
    }

    /// Volume-weighted inner products of `w` with each vector in `vs`,
    /// reduced per cube in global id order.
    fn dots(
        &self,
        ctx: &RankCtx,
        vs: &[Vec<f64>],
        w: &[f64],
        w3: &[f64],
        nc: usize,
    ) -> Result<Vec<f64>> {
        let parts: Vec<Vec<f64>> = (0..self.gids.len())
            .into_par_iter()
            .map(|li| {
                let r = li * nc..(li + 1) * nc;
                vs.iter()
                    .map(|v| {
                        v[r.clone()]
                            .iter()
                            .zip(&w[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * w3[li]
                    })
                    .collect()
            })
            .collect();
        let mut out = self.global_sums(ctx, parts)?;
        out.resize(vs.len(), 0.0);
        Ok(out)
    }

    /// Subtract the volume-weighted mean over the interior cells of level `m`.
    fn remove_mean(&self, m: usize, x: &mut Field, ctx: &RankCtx) -> Result<()> {
        let s = self.global_sums(ctx, self.weighted(m, x, None))?;
        let mean = s[0] / s[1];
        let offs = interior_offsets(self.levels[m].lay);
        for a in &mut x.cubes {
            for &i in &offs {
                a[i] -= mean;
            }
        }
        Ok(())
    }

    /// `r = b - L x` on level `m`; returns the volume-weighted 2-norm.
    fn residual_norm(
        &mut self,
        m: usize,
        x: &mut Field,
        ctx: &RankCtx,
        overlap: bool,
    ) -> Result<f64> {
        self.residual(m, x, ctx, overlap)?;
        let rr = self.global_sums(
            ctx,
            self.weighted(m, &self.levels[m].r, Some(&self.levels[m].r)),
        )?[0];
        Ok(rr.sqrt())
    }

    fn residual(&mut self, m: usize, x: &mut Field, ctx: &RankCtx, overlap: bool) -> Result<()> {
        let lvl = &mut self.levels[m];
        let (lay, plan, b, r, dx) = (lvl.lay, &lvl.plan, &lvl.b, &mut lvl.r, &lvl.dx);
        let offs = interior_offsets(lay);
        exchange_and(x, plan, &ctx.ep, overlap, |x, cubes| {
            par_cubes(&mut r.cubes, cubes, |li, out| {
                laplacian(&x.cubes[li], lay, dx[li], out);
                for &i in &offs {
                    out[i] = b.cubes[li][i] - out[i];
                }
            });
            Ok(())
        })
    }

    fn smooth(
        &mut self,
        m: usize,
        x: &mut Field,
        sweeps: usize,
        ctx: &RankCtx,
        overlap: bool,
    ) -> Result<()> {
        let omega = self.cfg.omega;
        let lvl = &mut self.levels[m];
        let (lay, plan, b, tmp, dx) = (lvl.lay, &lvl.plan, &lvl.b, &mut lvl.tmp, &lvl.dx);
        let offs = interior_offsets(lay);
        for _ in 0..sweeps {
            exchange_and(x, plan, &ctx.ep, overlap, |x, cubes| {
                par_cubes(tmp, cubes, |li, out| {
                    laplacian(&x.cubes[li], lay, dx[li], out);
                    let w = omega * dx[li] * dx[li] / 6.0;
                    let (xa, ba) = (&x.cubes[li], &b.cubes[li]);
                    for &i in &offs {
                        out[i] = xa[i] - w * (ba[i] - out[i]);
                    }
                });
                Ok(())
            })?;
            for (xa, t) in x.cubes.iter_mut().zip(tmp.iter()) {
                for &i in &offs {
                    xa[i] = t[i];
                }
            }
        }
        Ok(())
    }

    fn vcycle(&mut self, p: &mut Field, ctx: &RankCtx, overlap: bool) -> Result<()> {
        let depth = self.levels.len();
        let (pre, post) = (self.cfg.pre_sweeps, self.cfg.post_sweeps);
        // descend
        for m in 0..depth - 1 {
            let mut x = self.take_x(m, p);
            self.smooth(m, &mut x, pre, ctx, overlap)?;
            self.residual(m, &mut x, ctx, overlap)?;
            self.put_x(m, p, x);
            self.restrict(m);
            self.levels[m + 1].x.fill(0.0);
        }
        let coarsest = depth - 1;
        let mut x = self.take_x(coarsest, p);
        if coarsest == 0 {
            self.smooth(0, &mut x, pre + post, ctx, overlap)?;
        } else {
            self.coarse_solve(&mut x, ctx, overlap)?;
        }
        self.put_x(coarsest, p, x);
        // ascend
        for m in (0..depth - 1).rev() {
            let mut coarse = std::mem::replace(
                &mut self.levels[m + 1].x,
                Field::new(Quantity::Scratch, 1, Layout::new(2, 0), 0),
            );
            exchange(&mut coarse, &self.levels[m + 1].plan, &ctx.ep)?;
            let mut x = self.take_x(m, p);
            self.prolong_add(m, &coarse, &mut x);
            self.levels[m + 1].x = coarse;
            self.smooth(m, &mut x, post, ctx, overlap)?;
            self.put_x(m, p, x);
        }
        Ok(())
    }

    fn take_x(&mut self, m: usize, p: &mut Field) -> Field {
        if m == 0 {
            std::mem::replace(p, Field::new(Quantity::Pressure, 1, Layout::new(2, 0), 0))
        } else {
            std::mem::replace(
                &mut self.levels[m].x,
                Field::new(Quantity::Scratch, 1, Layout::new(2, 0), 0),
            )
        }
    }

    fn put_x(&mut self, m: usize, p: &mut Field, x: Field) {
        if m == 0 {
            *p = x;
        } else {
            self.levels[m].x = x;
        }
    }

    /// Coarse right-hand side = average of the 8 fine residual children.
    fn restrict(&mut self, m: usize) {
        let (fine, coarse) = self.levels.split_at_mut(m + 1);
        let (f, c) = (&fine[m], &mut coarse[0]);
        let (fl, cl) = (f.lay, c.lay);
        let nc = cl.cells as i64;
        c.b.cubes
            .par_iter_mut()
            .zip(f.r.cubes.par_iter())
            .for_each(|(cb, fr)| {
                for k in 0..nc {
                    for j in 0..nc {
                        for i in 0..nc {
                            let mut s = 0.0;
                            for (dk, dj, di) in CHILDREN {
                                s += fr[fl.index(2 * i + di, 2 * j + dj, 2 * k + dk)];
                            }
                            cb[cl.index(i, j, k)] = 0.125 * s;
                        }
                    }
                }
            });
    }

    /// Trilinear prolongation of the coarse correction (halo valid) added to `x`.
    fn prolong_add(&self, m: usize, coarse: &Field, x: &mut Field) {
        let (fl, cl) = (self.levels[m].lay, self.levels[m + 1].lay);
        let n = fl.cells as i64;
        x.cubes
            .par_iter_mut()
            .zip(coarse.cubes.par_iter())
            .for_each(|(xa, ca)| {
                for k in 0..n {
                    for j in 0..n {
                        for i in 0..n {
                            let (ci, cj, ck) = (i >> 1, j >> 1, k >> 1);
                            let (oi, oj, ok) = (2 * (i & 1) - 1, 2 * (j & 1) - 1, 2 * (k & 1) - 1);
                            let mut s = 0.0;
                            for (wk, dk) in [(0.75, 0), (0.25, ok)] {
                                for (wj, dj) in [(0.75, 0), (0.25, oj)] {
                                    for (wi, di) in [(0.75, 0), (0.25, oi)] {
                                        s += wi * wj * wk * ca[cl.index(ci + di, cj + dj, ck + dk)];
                                    }
                                }
                            }
                            xa[fl.index(i, j, k)] += s;
                        }
                    }
                }
            });
    }

    /// Conjugate gradients on `A e = c` with `A = -L` and `c = -b` at the
    /// coarsest level, with a fixed iteration cap.
    fn coarse_solve(&mut self, e: &mut Field, ctx: &RankCtx, overlap: bool) -> Result<()> {
        let m = self.levels.len() - 1;
        let lay = self.levels[m].lay;
        let offs = interior_offsets(lay);
        let n_local = self.gids.len();
        let mut res = self.levels[m].b.clone();
        for a in &mut res.cubes {
            a.iter_mut().for_each(|v| *v = -*v);
        }
        // the constant mode is the null space when no face fixes the level
        if self.singular {
            self.remove_mean(m, &mut res, ctx)?;
        }
        let mut d = res.clone();
        let mut rr = self.global_sums(ctx, self.weighted(m, &res, Some(&res)))?[0];
        let mut ad: Vec<Vec<f64>> = vec![vec![0.0; lay.volume()]; n_local];
        for _ in 0..self.cfg.coarse_iters {
            if !(rr > 0.0) {
                break;
            }
            {
                let (plan, dx) = (&self.levels[m].plan, &self.levels[m].dx);
                exchange_and(&mut d, plan, &ctx.ep, overlap, |d, cubes| {
                    par_cubes(&mut ad, cubes, |li, out| {
                        laplacian(&d.cubes[li], lay, dx[li], out);
                        for &i in &offs {
                            out[i] = -out[i];
                        }
                    });
                    Ok(())
                })?;
            }
            let dx = &self.levels[m].dx;
            let parts: Vec<Vec<f64>> = (0..n_local)
                .map(|li| {
                    let s: f64 = offs.iter().map(|&i| d.cubes[li][i] * ad[li][i]).sum();
                    vec![s * dx[li].powi(3)]
                })
                .collect();
            let dad = self.global_sums(ctx, parts)?[0];
            if !(dad > 0.0) {
                break;
            }
            let alpha = rr / dad;
            for li in 0..n_local {
                for &i in &offs {
                    e.cubes[li][i] += alpha * d.cubes[li][i];
                    res.cubes[li][i] -= alpha * ad[li][i];
                }
            }
            let rr_new = self.global_sums(ctx, self.weighted(m, &res, Some(&res)))?[0];
            let beta = rr_new / rr;
            rr = rr_new;
            for li in 0..n_local {
                for &i in &offs {
                    d.cubes[li][i] = res.cubes[li][i] + beta * d.cubes[li][i];
                }
            }
        }
        Ok(())
    }
}

const CHILDREN: [(i64, i64, i64); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];
