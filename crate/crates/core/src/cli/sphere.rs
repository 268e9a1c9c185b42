//! Flow past a fixed sphere: wake bubble length and vortex centre, compared
//! against the reference measurements at Re = 100.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::Deserialize;

use super::config::{
    BodyConfig, BodyShape, CaseConfig, FaceConfig, RefineConfig, SurfaceRefineConfig,
};
use super::run::{run_case_with_probe, RunOptions, RunSummary};
use crate::error::{Error, Result};
use crate::halo::exchange;
use crate::mesh::{Aabb, BcmMesh};
use crate::transport::RankId;

/// Reference wake of the present method at Re = 100, in diameters.
pub const REFERENCE_LENGTH: f64 = 0.794;
pub const REFERENCE_XC: f64 = 0.729;
pub const REFERENCE_YC: f64 = 0.288;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SphereCase {
    pub diameter: f64,
    pub reynolds: f64,
    pub inflow: f64,
    /// Half the domain edge, in diameters.
    pub half_width: f64,
    /// Finest cell size, in diameters.
    pub dx_over_d: f64,
    pub n_cells_per_edge: usize,
    pub n_levels: u8,
    pub subdivisions: u32,
    pub dt: f64,
    pub end_time: f64,
    /// Time between wake measurements.
    pub probe_every: f64,
    pub tol_length: f64,
    pub tol_center: f64,
    /// Largest change of the bubble length between the last two probes
    /// for the wake to count as steady.
    pub steady_tol: f64,
    /// The run ends once the wake is steady and at least this much time
    /// has passed; set it past `end_time` to always run to the end.
    pub min_time: f64,
    /// Relative Poisson residual target.
    pub poisson_tol: f64,
    pub ranks: usize,
    pub threads: usize,
    pub overlap: bool,
    pub output: PathBuf,
}

impl Default for SphereCase {
    fn default() -> Self {
        Self {
            diameter: 1.0,
            reynolds: 100.0,
            inflow: 1.0,
            half_width: 8.0,
            dx_over_d: 0.05,
            n_cells_per_edge: 16,
            n_levels: 3,
            subdivisions: 5,
            dt: 0.008,
            end_time: 40.0,
            probe_every: 2.0,
            tol_length: 0.12,
            tol_center: 0.10,
            steady_tol: 0.02,
            min_time: 16.0,
            poisson_tol: 1e-6,
            ranks: 1,
            threads: 1,
            overlap: true,
            output: PathBuf::from("sphere"),
        }
    }
}

impl SphereCase {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Finest-level cell size.
    pub fn dx(&self) -> f64 {
        self.dx_over_d * self.diameter
    }

    /// The equivalent general case: sphere at the origin, inflow on x-,
    /// outflow on x+, slip on the lateral faces, and nested refinement
    /// boxes around the sphere and its near wake.
    pub fn case_config(&self) -> CaseConfig {
        let d = self.diameter;
        let top = self.n_levels.saturating_sub(1);
        let root = self.dx() * self.n_cells_per_edge as f64 * f64::from(1u32 << top);
        let mut cfg = CaseConfig::default();
        cfg.domain.min = [-self.half_width * d; 3];
        cfg.domain.max = [self.half_width * d; 3];
        cfg.domain.root_edge = root;
        cfg.domain.n_cells_per_edge = self.n_cells_per_edge;
        cfg.domain.n_levels = self.n_levels;
        for level in 1..self.n_levels {
            let s = f64::from(1u32 << (top - level)) * d;
            cfg.refine.push(RefineConfig {
                min: [-0.75 * s, -0.75 * s, -0.75 * s],
                max: [2.0 * s, 0.75 * s, 0.75 * s],
                level,
            });
        }
        if top > 0 {
            cfg.refine_surface.push(SurfaceRefineConfig {
                body: 0,
                distance: 2.0 * self.dx(),
                level: top,
            });
        }
        cfg.fluid.rho = 1.0;
        cfg.fluid.mu = if self.reynolds > 0.0 {
            self.inflow.abs().max(1.0) * d / self.reynolds
        } else {
            0.0
        };
        cfg.time.dt = self.dt;
        cfg.time.end_time = self.end_time;
        // the refined wake mesh leaves a large coarsest level that ten CG
        // iterations barely touch
        cfg.solver.coarse_cg_iters = 200;
        cfg.solver.poisson_tol = self.poisson_tol;
        cfg.boundary.x_min = FaceConfig::Inflow([self.inflow, 0.0, 0.0]);
        cfg.boundary.x_max = FaceConfig::Outflow;
        for f in [
            &mut cfg.boundary.y_min,
            &mut cfg.boundary.y_max,
            &mut cfg.boundary.z_min,
            &mut cfg.boundary.z_max,
        ] {
            *f = FaceConfig::Slip;
        }
        cfg.body.push(BodyConfig {
            shape: BodyShape::Sphere,
            center: [0.0; 3],
            radius: 0.5 * d,
            subdivisions: self.subdivisions,
            ..BodyConfig::default()
        });
        cfg.initial.velocity = [self.inflow, 0.0, 0.0];
        cfg.parallel.ranks = self.ranks;
        cfg.parallel.threads = self.threads;
        cfg.parallel.overlap = self.overlap;
        cfg.output.dir = self.output.clone();
        cfg.output.force_every = 10;
        cfg
    }
}

/// Bubble length behind the rear stagnation point and vortex centre
/// (streamwise from the sphere centre, radial from the axis), all in
/// diameters. `center` is `None` when there is no recirculation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WakeMetrics {
    pub length: f64,
    pub center: Option<[f64; 2]>,
}

/// Measure the wake of a sphere of diameter `d` at the origin from a
/// velocity sampler; `h` is the sampling step.
pub fn wake_metrics(sample: &dyn Fn([f64; 3]) -> Option<[f64; 3]>, d: f64, h: f64) -> WakeMetrics {
    let rear = 0.5 * d;
    let ux = |x: f64| sample([x, 0.0, 0.0]).map(|u| u[0]);
    // reverse flow must start within a quarter diameter of the rear
    let mut x = rear;
    let mut first = None;
    while x < rear + 0.25 * d {
        if ux(x).is_some_and(|u| u < 0.0) {
            first = Some(x);
            break;
        }
        x += h;
    }
    let Some(mut x) = first else {
        return WakeMetrics {
            length: 0.0,
            center: None,
        };
    };
    let mut prev = ux(x).unwrap_or(0.0);
    let end = loop {
        let next = x + h;
        match ux(next) {
            Some(u) if u < 0.0 => {
                prev = u;
                x = next;
            }
            Some(u) => break x + h * prev / (prev - u),
            None => break x,
        }
    };
    let length = (end - rear) / d;

    // vortex centre: slowest in-plane point of the bubble, outside the body
    let mut best = (f64::INFINITY, [0.0; 2]);
    let mut y = h;
    while y <= 0.75 * d {
        let mut x = 0.0;
        while x <= end {
            if (x * x + y * y).sqrt() > rear + 3.0 * h {
                if let Some(u) = sample([x, y, 0.0]) {
                    let s = u[0] * u[0] + u[1] * u[1];
                    if s < best.0 {
                        best = (s, [x / d, y / d]);
                    }
                }
            }
            x += h;
        }
        y += h;
    }
    WakeMetrics {
        length,
        center: best.0.is_finite().then_some(best.1),
    }
}

/// Trilinear velocity sampler over gathered cube arrays (halo included).
pub struct Sampler<'a> {
    pub mesh: &'a BcmMesh,
    pub cubes: &'a HashMap<usize, Vec<f64>>,
    pub side: usize,
    pub halo: usize,
}

impl Sampler<'_> {
    pub fn velocity(&self, x: [f64; 3]) -> Option<[f64; 3]> {
        let g = self.mesh.locate_cube(x)?;
        let a = self.cubes.get(&g)?;
        let cube = self.mesh.cube(g);
        let h = cube.cell_spacing;
        let side = self.side;
        let v = side * side * side;
        let mut base = [0usize; 3];
        let mut w = [0.0; 3];
        for k in 0..3 {
            let s = (x[k] - cube.base_corner[k]) / h - 0.5;
            let i0 = s.floor();
            w[k] = s - i0;
            base[k] = (i0 as i64 + self.halo as i64) as usize;
        }
        let mut u = [0.0; 3];
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, corner >> 2];
            let mut wt = 1.0;
            for k in 0..3 {
                wt *= if o[k] == 1 { w[k] } else { 1.0 - w[k] };
            }
            let idx = (base[0] + o[0]) + side * ((base[1] + o[1]) + side * (base[2] + o[2]));
            for c in 0..3 {
                u[c] += wt * a[c * v + idx];
            }
        }
        Some(u)
    }
}

#[derive(Clone, Debug)]
pub struct SphereReport {
    pub probes: Vec<(f64, WakeMetrics)>,
    pub wake: WakeMetrics,
    pub steady: bool,
    pub drag_coefficient: f64,
    pub length_ok: bool,
    pub center_ok: bool,
    pub tol_length: f64,
    pub tol_center: f64,
    pub run: RunSummary,
}

impl SphereReport {
    pub fn passed(&self) -> bool {
        self.steady && self.length_ok && self.center_ok
    }

    pub fn table(&self) -> String {
        let mut s = String::from("quantity,measured,reference,tolerance,status\n");
        let c = self.wake.center;
        let row = |s: &mut String, name: &str, m: Option<f64>, r: f64, tol: f64| {
            let ok = m.is_some_and(|m| (m - r).abs() <= tol);
            let m = m.map_or("none".into(), |m| format!("{m:.4}"));
            s.push_str(&format!(
                "{name},{m},{r},{tol},{}\n",
                if ok { "PASS" } else { "FAIL" }
            ));
        };
        row(
            &mut s,
            "L_b/D",
            Some(self.wake.length),
            REFERENCE_LENGTH,
            self.tol_length,
        );
        row(
            &mut s,
            "x_c/D",
            c.map(|c| c[0]),
            REFERENCE_XC,
            self.tol_center,
        );
        row(
            &mut s,
            "y_c/D",
            c.map(|c| c[1]),
            REFERENCE_YC,
            self.tol_center,
        );
        s.push_str(&format!(
            "steady,{},,,{}\n",
            self.steady,
            if self.steady { "PASS" } else { "FAIL" }
        ));
        s.push_str(&format!("C_d,{:.4},,,info\n", self.drag_coefficient));
        s
    }
}

/// A wake is steady when the bubble length moved by at most `tol` between
/// the last two measurements.
fn is_steady(probes: &[(f64, WakeMetrics)], tol: f64) -> bool {
    probes.len() >= 2 && {
        let (a, b) = (probes[probes.len() - 2].1, probes[probes.len() - 1].1);
        (a.length - b.length).abs() <= tol
    }
}

/// Run the sphere case and measure its wake every `probe_every`.
pub fn validate_sphere(case: &SphereCase, opts: &RunOptions) -> Result<SphereReport> {
    let cfg = case.case_config();
    let d = case.diameter;
    let h = 0.25 * case.dx();
    let probe_steps = ((case.probe_every / case.dt).round() as u64).max(1);
    let probes = Mutex::new(Vec::new());
    let region = Aabb::new(
        [-0.6 * d, -2.0 * case.dx(), -2.0 * case.dx()],
        [3.5 * d, 0.8 * d, 2.0 * case.dx()],
    );
    let run = run_case_with_probe(&cfg, opts, &|ctx, solver, st| {
        if st.step % probe_steps != 0 && st.step != cfg.time.steps() {
            return Ok(false);
        }
        exchange(&mut st.u, solver.plan(), &ctx.ep)?;
        let mesh = solver.mesh();
        let mine: Vec<(usize, Vec<f64>)> = solver
            .local_gids()
            .iter()
            .zip(&st.u.cubes)
            .filter(|(&g, _)| mesh.cube(g).bounds().overlaps(&region))
            .map(|(&g, a)| (g, a.clone()))
            .collect();
        // every rank contributes to the gather, but only rank 0 measures
        let all = gather_any_width(ctx, &mine)?;
        if ctx.rank() == RankId(0) {
            let cubes: HashMap<usize, Vec<f64>> = all.into_iter().collect();
            let lay = solver.layout();
            let sampler = Sampler {
                mesh,
                cubes: &cubes,
                side: lay.side(),
                halo: lay.halo,
            };
            let m = wake_metrics(&|x| sampler.velocity(x), d, h);
            probes.lock().unwrap().push((st.t, m));
        }
        let done = ctx.rank() == RankId(0)
            && st.t >= case.min_time
            && is_steady(&probes.lock().unwrap(), case.steady_tol);
        Ok(ctx.max(if done { 1.0 } else { 0.0 })? > 0.0)
    })?;
    let probes = probes.into_inner().unwrap();
    let wake = probes.last().map_or(
        WakeMetrics {
            length: 0.0,
            center: None,
        },
        |p| p.1,
    );
    let steady = is_steady(&probes, case.steady_tol);
    let fx = run.forces.last().map_or(0.0, |f| f.1[0]);
    let q = 0.5 * case.inflow * case.inflow * PI * d * d / 4.0;
    let drag_coefficient = if q > 0.0 { fx / q } else { 0.0 };
    let length_ok = (wake.length - REFERENCE_LENGTH).abs() <= case.tol_length;
    let center_ok = wake.center.is_some_and(|c| {
        (c[0] - REFERENCE_XC).abs() <= case.tol_center
            && (c[1] - REFERENCE_YC).abs() <= case.tol_center
    });
    Ok(SphereReport {
        probes,
        wake,
        steady,
        drag_coefficient,
        length_ok,
        center_ok,
        tol_length: case.tol_length,
        tol_center: case.tol_center,
        run,
    })
}

/// Gather variable-size per-cube arrays onto every rank, sorted by id.
fn gather_any_width(
    ctx: &crate::parallel::RankCtx,
    mine: &[(usize, Vec<f64>)],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut bytes = Vec::new();
    for (g, a) in mine {
        bytes.extend_from_slice(&(*g as u64).to_le_bytes());
        bytes.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for x in a {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut out = Vec::new();
    for b in ctx.ep.allgather(bytes)? {
        let rd = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let mut o = 0;
        while o < b.len() {
            let (g, n) = (rd(o) as usize, rd(o + 8) as usize);
            o += 16;
            out.push((g, (0..n).map(|k| f64::from_bits(rd(o + 8 * k))).collect()));
            o += 8 * n;
        }
    }
    out.sort_by_key(|e| e.0);
    Ok(out)
}
