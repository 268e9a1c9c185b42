//! Case configuration, read from TOML. Every section has defaults so a
//! case file only needs to say what differs.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::halo::{Boundary, BoundaryConditions};
use crate::io::Compression;
use crate::lagrangian::{read_stl, Ramp, RigidBody};
use crate::loadbalance::BalanceConfig;
use crate::mesh::{Aabb, MeshSpec, RefineRegion, SurfaceRefine};
use crate::solver::multigrid::MgConfig;
use crate::solver::{Integrator, SolverConfig, HALO};

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CaseConfig {
    pub domain: DomainConfig,
    pub refine: Vec<RefineConfig>,
    pub refine_surface: Vec<SurfaceRefineConfig>,
    pub fluid: FluidConfig,
    pub time: TimeConfig,
    pub boundary: BoundaryConfig,
    pub body: Vec<BodyConfig>,
    pub solver: SolverSection,
    pub balance: BalanceSection,
    pub parallel: ParallelSection,
    pub output: OutputSection,
    pub initial: InitialSection,
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub root_edge: f64,
    pub n_cells_per_edge: usize,
    pub n_levels: u8,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            min: [0.0; 3],
            max: [1.0; 3],
            root_edge: 0.5,
            n_cells_per_edge: 8,
            n_levels: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub level: u8,
}

/// Refine every cube within `distance` of body `body`'s surface.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SurfaceRefineConfig {
    pub body: u32,
    pub distance: f64,
    pub level: u8,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FluidConfig {
    pub rho: f64,
    pub mu: f64,
}

impl Default for FluidConfig {
    fn default() -> Self {
        Self { rho: 1.0, mu: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorName {
    Euler,
    Ab2,
    CrankNicolson,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub end_time: f64,
    pub integrator: IntegratorName,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            end_time: 0.1,
            integrator: IntegratorName::Ab2,
        }
    }
}

impl TimeConfig {
    /// Whole steps needed to reach `end_time`.
    pub fn steps(&self) -> u64 {
        (self.end_time / self.dt - 1e-9).ceil().max(0.0) as u64
    }
}

/// `"no_slip"`, `"slip"`, `"outflow"` or `{ inflow = [u, v, w] }`.
#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FaceConfig {
    NoSlip,
    Slip,
    Outflow,
    Inflow([f64; 3]),
}

impl From<FaceConfig> for Boundary {
    fn from(f: FaceConfig) -> Self {
        match f {
            FaceConfig::NoSlip => Boundary::NoSlip,
            FaceConfig::Slip => Boundary::Slip,
            FaceConfig::Outflow => Boundary::Outflow,
            FaceConfig::Inflow(u) => Boundary::Inflow(u),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub x_min: FaceConfig,
    pub x_max: FaceConfig,
    pub y_min: FaceConfig,
    pub y_max: FaceConfig,
    pub z_min: FaceConfig,
    pub z_max: FaceConfig,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            x_min: FaceConfig::NoSlip,
            x_max: FaceConfig::NoSlip,
            y_min: FaceConfig::NoSlip,
            y_max: FaceConfig::NoSlip,
            z_min: FaceConfig::NoSlip,
            z_max: FaceConfig::NoSlip,
        }
    }
}

impl BoundaryConfig {
    pub fn conditions(&self) -> BoundaryConditions {
        BoundaryConditions {
            faces: [
                self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max,
            ]
            .map(Boundary::from),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BodyShape {
    Sphere,
    Stl,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BodyConfig {
    pub shape: BodyShape,
    pub center: [f64; 3],
    /// Sphere only.
    pub radius: f64,
    pub subdivisions: u32,
    /// STL only; relative paths resolve against the case file.
    pub path: Option<PathBuf>,
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    /// Optional start-up ramp on the angular velocity.
    pub ramp_alpha: Option<f64>,
    pub ramp_t0: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            shape: BodyShape::Sphere,
            center: [0.5; 3],
            radius: 0.1,
            subdivisions: 3,
            path: None,
            linear_velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
            ramp_alpha: None,
            ramp_t0: 0.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub poisson_tol: f64,
    pub max_vcycles: usize,
    pub coarse_cg_iters: usize,
    /// Flexible GMRES restart length around the V-cycle; 0 for plain cycles.
    pub krylov_restart: usize,
    pub convection: bool,
    pub cn_tol: f64,
    pub cn_max_iter: usize,
    /// Abort when the CFL number exceeds this.
    pub max_cfl: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let mg = MgConfig::default();
        let s = SolverConfig::default();
        Self {
            poisson_tol: mg.tol,
            max_vcycles: mg.max_cycles,
            coarse_cg_iters: mg.coarse_iters,
            krylov_restart: mg.krylov_restart,
            convection: s.convection,
            cn_tol: s.cn_tol,
            cn_max_iter: s.cn_max_iter,
            max_cfl: 1.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSection {
    pub enabled: bool,
    pub kappa: f64,
    pub gamma: f64,
    pub every: u64,
}

impl Default for BalanceSection {
    fn default() -> Self {
        let b = BalanceConfig::default();
        Self {
            enabled: false,
            kappa: b.kappa,
            gamma: b.gamma,
            every: b.every,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelSection {
    pub ranks: usize,
    pub threads: usize,
    pub overlap: bool,
}

impl Default for ParallelSection {
    fn default() -> Self {
        Self {
            ranks: 1,
            threads: 1,
            overlap: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    Lossless,
    Lossy,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Steps between force samples.
    pub force_every: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub checkpoint_mode: CheckpointMode,
    /// Relative (to field range) error bound of lossy checkpoints.
    pub checkpoint_tol: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            force_every: 1,
            checkpoint_every: 0,
            checkpoint_mode: CheckpointMode::Lossless,
            checkpoint_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSection {
    pub velocity: [f64; 3],
    /// Amplitude of seeded random velocity noise.
    pub noise: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            velocity: [0.0; 3],
            noise: 0.0,
        }
    }
}

impl CaseConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a case file; relative STL paths are resolved against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for b in &mut cfg.body {
            if let Some(p) = &mut b.path {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.parallel.ranks == 0 || self.parallel.threads == 0 {
            return fail("ranks and threads must be positive".into());
        }
        if !(self.time.dt > 0.0) || !(self.time.end_time >= 0.0) {
            return fail("need dt > 0 and end_time >= 0".into());
        }
        let s = &self.solver;
        if !(s.poisson_tol > 0.0)
            || s.max_vcycles == 0
            || s.coarse_cg_iters == 0
            || !(s.cn_tol > 0.0)
            || s.cn_max_iter == 0
        {
            return fail("solver tolerances and iteration caps must be positive".into());
        }
        if !(s.max_cfl > 0.0) {
            return fail("max_cfl must be positive".into());
        }
        if self.output.force_every == 0 {
            return fail("force_every must be positive".into());
        }
        if self.output.checkpoint_mode == CheckpointMode::Lossy
            && !(self.output.checkpoint_tol > 0.0)
        {
            return fail("lossy checkpoints need checkpoint_tol > 0".into());
        }
        self.balance_config().validate()?;
        self.solver_config().validate()?;
        for (i, b) in self.body.iter().enumerate() {
            match b.shape {
                BodyShape::Sphere if !(b.radius > 0.0) || b.subdivisions > 8 => {
                    return fail(format!(
                        "body {i}: sphere needs radius > 0 and at most 8 subdivisions"
                    ));
                }
                BodyShape::Stl => match &b.path {
                    None => return fail(format!("body {i}: stl body needs a path")),
                    Some(p) if !p.is_file() => {
                        return fail(format!("body {i}: {} does not exist", p.display()))
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        for r in &self.refine_surface {
            if r.body as usize >= self.body.len() {
                return fail(format!(
                    "refine_surface names body {} but only {} exist",
                    r.body,
                    self.body.len()
                ));
            }
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            rho: self.fluid.rho,
            mu: self.fluid.mu,
            dt: self.time.dt,
            integrator: match self.time.integrator {
                IntegratorName::Euler => Integrator::Euler,
                IntegratorName::Ab2 => Integrator::Ab2,
                IntegratorName::CrankNicolson => Integrator::CrankNicolson,
            },
            convection: s.convection,
            overlap: self.parallel.overlap,
            mg: MgConfig {
                tol: s.poisson_tol,
                max_cycles: s.max_vcycles,
                coarse_iters: s.coarse_cg_iters,
                krylov_restart: s.krylov_restart,
                ..MgConfig::default()
            },
            cn_tol: s.cn_tol,
            cn_max_iter: s.cn_max_iter,
        }
    }

    pub fn balance_config(&self) -> BalanceConfig {
        BalanceConfig {
            kappa: self.balance.kappa,
            gamma: self.balance.gamma,
            halo_width: HALO,
            every: self.balance.every,
        }
    }

    pub fn compression(&self) -> Compression {
        match self.output.checkpoint_mode {
            CheckpointMode::Lossless => Compression::Lossless,
            CheckpointMode::Lossy => Compression::Lossy {
                rel_tol: self.output.checkpoint_tol,
            },
        }
    }

    /// Bodies with ids in declaration order.
    pub fn bodies(&self) -> Result<Vec<RigidBody>> {
        self.body
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let id = i as u32;
                let mut body = match b.shape {
                    BodyShape::Sphere => RigidBody::sphere(id, b.center, b.radius, b.subdivisions),
                    BodyShape::Stl => {
                        let p = b
                            .path
                            .as_ref()
                            .ok_or_else(|| Error::Config(format!("body {i}: missing path")))?;
                        RigidBody::new(id, read_stl(p)?, b.center)?
                    }
                };
                body.linear_velocity = b.linear_velocity;
                body.angular_velocity = b.angular_velocity;
                body.ramp = b.ramp_alpha.map(|alpha| Ramp {
                    alpha,
                    t0: b.ramp_t0,
                });
                Ok(body)
            })
            .collect()
    }

    pub fn mesh_spec(&self, bodies: &[RigidBody]) -> MeshSpec {
        let d = &self.domain;
        let mut spec = MeshSpec::uniform(Aabb::new(d.min, d.max), d.root_edge, d.n_cells_per_edge);
        spec.n_levels = d.n_levels;
        spec.refine = self
            .refine
            .iter()
            .map(|r| RefineRegion {
                region: Aabb::new(r.min, r.max),
                level: r.level,
            })
            .collect();
        spec.surface_refine = self
            .refine_surface
            .iter()
            .filter_map(|r| {
                bodies.get(r.body as usize).map(|b| SurfaceRefine {
                    triangles: b.triangles.clone(),
                    distance: r.distance,
                    level: r.level,
                })
            })
            .collect();
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_case() {
        let cfg = CaseConfig::from_toml(
            r#"
            seed = 7
            [domain]
            min = [0.0, 0.0, 0.0]
            max = [2.0, 1.0, 1.0]
            root_edge = 0.5
            n_cells_per_edge = 8
            n_levels = 2
            [[refine_surface]]
            body = 0
            distance = 0.05
            level = 1
            [fluid]
            mu = 0.02
            [time]
            dt = 0.005
            end_time = 0.05
            integrator = "crank_nicolson"
            [boundary]
            x_min = { inflow = [1.0, 0.0, 0.0] }
            x_max = "outflow"
            y_min = "slip"
            [[body]]
            shape = "sphere"
            center = [0.8, 0.5, 0.5]
            radius = 0.2
            ramp_alpha = 2.0
            [balance]
            enabled = true
            [parallel]
            ranks = 4
            [output]
            checkpoint_every = 5
            checkpoint_mode = "lossy"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.time.steps(), 10);
        let bc = cfg.boundary.conditions();
        assert_eq!(bc.faces[0], Boundary::Inflow([1.0, 0.0, 0.0]));
        assert_eq!(bc.faces[1], Boundary::Outflow);
        assert_eq!(bc.faces[2], Boundary::Slip);
        assert_eq!(bc.faces[3], Boundary::NoSlip);
        assert_eq!(cfg.solver_config().integrator, Integrator::CrankNicolson);
        assert_eq!(cfg.compression(), Compression::Lossy { rel_tol: 1e-4 });
        let bodies = cfg.bodies().unwrap();
        assert_eq!(
            bodies[0].ramp,
            Some(Ramp {
                alpha: 2.0,
                t0: 0.0
            })
        );
        assert_eq!(cfg.mesh_spec(&bodies).surface_refine.len(), 1);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(CaseConfig::from_toml("[domain]\nbogus = 1").is_err());
        for text in [
            "[solver]\nmax_vcycles = 0",
            "[time]\ndt = -1.0",
            "[balance]\nkappa = 0.9",
            "[parallel]\nranks = 0",
            "[[body]]\nshape = \"stl\"\npath = \"/no/such/file.stl\"",
            "[[refine_surface]]\nbody = 0\ndistance = 0.1\nlevel = 1",
        ] {
            let cfg = CaseConfig::from_toml(text).unwrap();
            assert!(cfg.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn step_count_rounds_up() {
        let t = |dt, end_time| {
            TimeConfig {
                dt,
                end_time,
                integrator: IntegratorName::Ab2,
            }
            .steps()
        };
        assert_eq!(t(0.1, 0.0), 0);
        assert_eq!(t(0.1, 0.3), 3);
        assert_eq!(t(0.1, 0.31), 4);
    }
}
