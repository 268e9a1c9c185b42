//! Time loop driver shared by the `run` subcommand and the validation cases.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::CaseConfig;
use crate::decomp::{linear_distribution, partition_lagrangian};
use crate::error::{Error, Result};
use crate::io::{load_flow, save_flow};
use crate::lagrangian::{assign_sets, discretize_surface, ParticleSet, RigidBody};
use crate::loadbalance::rebalance;
use crate::mesh::{generate_mesh, BcmMesh};
use crate::parallel::{run_ranks, RankCtx};
use crate::solver::{FlowState, ForceHistory, Geometry, Solver, StepReport};
use crate::transport::{Perturbation, RankId};

/// Mesh, bodies and the global particle sets of a case.
pub struct Case {
    pub mesh: Arc<BcmMesh>,
    pub bodies: Vec<RigidBody>,
    /// One set per cube, in global id order.
    pub sets: Vec<ParticleSet>,
}

impl Case {
    pub fn build(cfg: &CaseConfig) -> Result<Self> {
        let bodies = cfg.bodies()?;
        let mesh = Arc::new(generate_mesh(&cfg.mesh_spec(&bodies))?);
        let mut particles = Vec::new();
        for b in &bodies {
            particles.extend(discretize_surface(b, &mesh, particles.len() as u64)?);
        }
        let sets = assign_sets(&particles, &mesh)?;
        Ok(Self { mesh, bodies, sets })
    }

    pub fn particle_count(&self) -> usize {
        self.sets.iter().map(ParticleSet::len).sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of the initial condition.
    pub restart: Option<PathBuf>,
    /// Randomised message delays; results must not change.
    pub perturbation: Option<Perturbation>,
    /// Echo log lines to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub steps_taken: u64,
    pub final_step: u64,
    pub t: f64,
    /// `(t, force)` at every force sample.
    pub forces: Vec<(f64, [f64; 3])>,
    pub rebalances: usize,
    pub checkpoints: Vec<PathBuf>,
    pub unconverged_steps: usize,
    pub seconds_per_step: f64,
}

/// Everything rank 0 writes.
struct Outputs {
    forces: BufWriter<File>,
    balance: BufWriter<File>,
    log: BufWriter<File>,
    history: ForceHistory,
    verbose: bool,
}

impl Outputs {
    fn create(dir: &Path, verbose: bool) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        let mut forces = open("forces.csv")?;
        writeln!(forces, "step,{}", ForceHistory::HEADER)?;
        let mut balance = open("balance.csv")?;
        writeln!(balance, "step,imbalance_before,imbalance_after,edge_cut_before,edge_cut_after,cubes_moved,bytes_sent")?;
        Ok(Self {
            forces,
            balance,
            log: open("log.txt")?,
            history: ForceHistory::new(),
            verbose,
        })
    }

    fn log(&mut self, line: &str) -> Result<()> {
        if self.verbose {
            eprintln!("{line}");
        }
        writeln!(self.log, "{line}")?;
        self.log.flush()?;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step}.ckpt"))
}

/// Uniform velocity plus seeded noise drawn per global cube, so the initial
/// state does not depend on the rank layout.
pub fn initial_state(cfg: &CaseConfig, solver: &Solver) -> FlowState {
    let mut st = solver.new_state();
    let lay = solver.layout();
    let v = lay.volume();
    for (li, &g) in solver.local_gids().iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ g as u64);
        for idx in lay.interior() {
            for c in 0..3 {
                let noise = if cfg.initial.noise > 0.0 {
                    cfg.initial.noise * rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                };
                st.u.cubes[li][c * v + idx] = cfg.initial.velocity[c] + noise;
            }
        }
    }
    st
}

/// Geometric mean of the per-cycle residual reductions.
fn mean_factor(f: &[f64]) -> f64 {
    if f.is_empty() {
        return 0.0;
    }
    (f.iter().map(|x| x.max(1e-300).ln()).sum::<f64>() / f.len() as f64).exp()
}

fn check_numerics(rep: &StepReport, max_cfl: f64) -> Result<()> {
    if !rep.cfl.is_finite() || rep.cfl > max_cfl {
        return Err(Error::Numerics(format!(
            "CFL {} exceeds {max_cfl} at step {}",
            rep.cfl, rep.step
        )));
    }
    if !rep.mg.rel_residual.is_finite() || rep.force.iter().any(|f| !f.is_finite()) {
        return Err(Error::Numerics(format!(
            "non-finite pressure residual or force at step {}",
            rep.step
        )));
    }
    Ok(())
}

/// Per-rank hook called after every step with the current state. Returning
/// `true` ends the run early; all ranks must return the same answer.
pub type Probe<'a> = dyn Fn(&RankCtx, &Solver, &mut FlowState) -> Result<bool> + Sync + 'a;

/// Run the case to `cfg.time.end_time`. Writes `forces.csv`, `balance.csv`,
/// `log.txt` and checkpoints under `cfg.output.dir`.
pub fn run_case(cfg: &CaseConfig, opts: &RunOptions) -> Result<RunSummary> {
    run_case_with_probe(cfg, opts, &|_, _, _| Ok(false))
}

pub fn run_case_with_probe(
    cfg: &CaseConfig,
    opts: &RunOptions,
    probe: &Probe<'_>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let case = Case::build(cfg)?;
    let p = cfg.parallel.ranks;
    let dist0 = linear_distribution(case.mesh.len(), p)?;
    let per_rank = partition_lagrangian(case.sets.clone(), &dist0);
    let geom0 = Geometry::new(case.mesh.clone(), dist0)?;
    let scfg = cfg.solver_config();
    let bc = cfg.boundary.conditions();
    let bal = cfg.balance_config();
    let dir = cfg.output.dir.as_path();
    let n_steps = cfg.time.steps();
    let every_ckpt = cfg.output.checkpoint_every;

    let out = run_ranks(p, cfg.parallel.threads, opts.perturbation, |ctx| {
        let root = ctx.rank() == RankId(0);
        let mut outputs = if root {
            Some(Outputs::create(dir, opts.verbose)?)
        } else {
            None
        };
        // everyone waits for the output folders to exist
        ctx.ep.barrier();
        let (mut geom, mut st, mut sets) = match &opts.restart {
            Some(path) => load_flow(path, ctx)?,
            None => {
                let s = Solver::new(&geom0, ctx, scfg, bc)?;
                let st = initial_state(cfg, &s);
                (
                    geom0.with_distribution(geom0.dist.clone()),
                    st,
                    per_rank[ctx.rank().0].clone(),
                )
            }
        };
        if geom.mesh.leaves() != case.mesh.leaves() {
            return Err(Error::Config(
                "checkpoint mesh differs from the case mesh".into(),
            ));
        }
        let mut solver = Solver::new(&geom, ctx, scfg, bc)?;
        let mut summary = RunSummary::default();
        if let Some(o) = &mut outputs {
            o.log(&format!(
                "cubes {} cells {} particles {} ranks {} threads {} steps {}..{} dt {}",
                case.mesh.len(),
                case.mesh.stats().total_cells,
                case.particle_count(),
                p,
                ctx.threads(),
                st.step,
                n_steps,
                scfg.dt
            ))?;
        }
        if every_ckpt > 0 && opts.restart.is_none() && st.step == 0 {
            let path = checkpoint_path(dir, 0);
            save_flow(&path, ctx, &geom, &st, &sets, cfg.compression())?;
            summary.checkpoints.push(path);
        }
        let start = Instant::now();
        while st.step < n_steps {
            let rep = solver.step(&mut st, &mut sets, &case.bodies, ctx)?;
            check_numerics(&rep, cfg.solver.max_cfl)?;
            summary.steps_taken += 1;
            if !rep.mg.converged {
                summary.unconverged_steps += 1;
            }
            let stop = probe(ctx, &solver, &mut st)?;
            if let Some(o) = &mut outputs {
                if st.step % cfg.output.force_every == 0 {
                    write!(o.forces, "{},", st.step)?;
                    o.history.record(&mut o.forces, st.t, rep.force)?;
                    summary.forces.push((st.t, rep.force));
                }
                o.log(&format!(
                    "step {} t {:.6} cfl {:.4} vcycles {} factor {:.3} residual {:.3e}{} div* {:.3e} force {:.6e} {:.6e} {:.6e}",
                    st.step,
                    st.t,
                    rep.cfl,
                    rep.mg.cycles,
                    mean_factor(&rep.mg.factors),
                    rep.mg.rel_residual,
                    if rep.mg.converged { "" } else { " (cap reached)" },
                    rep.div_star,
                    rep.force[0],
                    rep.force[1],
                    rep.force[2]
                ))?;
            }
            if cfg.balance.enabled && st.step % bal.every == 0 {
                let (outcome, stats) = rebalance(ctx, &geom, &mut st, &mut sets, &bal)?;
                let bytes = ctx.sum_u64(stats.bytes_sent as u64)?;
                if let Some(o) = &mut outputs {
                    writeln!(
                        o.balance,
                        "{},{:.6},{:.6},{},{},{},{}",
                        st.step,
                        outcome.before.ratio,
                        outcome.after.ratio,
                        outcome.cut_before,
                        outcome.cut_after,
                        outcome.cubes_moved,
                        bytes
                    )?;
                }
                if let Some(d) = outcome.distribution {
                    geom = geom.with_distribution(d);
                    solver = Solver::new(&geom, ctx, scfg, bc)?;
                    summary.rebalances += 1;
                }
            }
            if every_ckpt > 0 && (st.step % every_ckpt == 0 || st.step == n_steps || stop) {
                let path = checkpoint_path(dir, st.step);
                save_flow(&path, ctx, &geom, &st, &sets, cfg.compression())?;
                summary.checkpoints.push(path);
            }
            if stop {
                break;
            }
        }
        summary.seconds_per_step =
            start.elapsed().as_secs_f64() / summary.steps_taken.max(1) as f64;
        summary.final_step = st.step;
        summary.t = st.t;
        if let Some(o) = &mut outputs {
            o.log(&format!(
                "done: {} steps, {:.4} s/step, {} rebalances, {} steps hit the V-cycle cap",
                summary.steps_taken,
                summary.seconds_per_step,
                summary.rebalances,
                summary.unconverged_steps
            ))?;
            o.forces.flush()?;
            o.balance.flush()?;
            o.log.flush()?;
        }
        Ok(summary)
    })?;
    Ok(out.into_iter().next().expect("at least one rank"))
}

/// Human-readable execution plan, computed without any time stepping.
pub fn plan(cfg: &CaseConfig, opts: &RunOptions) -> Result<String> {
    cfg.validate()?;
    let case = Case::build(cfg)?;
    let stats = case.mesh.stats();
    let dist = linear_distribution(case.mesh.len(), cfg.parallel.ranks)?;
    let mut s = String::new();
    let mut line = |t: String| {
        s.push_str(&t);
        s.push('\n');
    };
    line(format!(
        "mesh: {} cubes of {}^3 cells, {} cells in total",
        stats.total_cubes,
        case.mesh.n_cells_per_edge(),
        stats.total_cells
    ));
    for (l, n) in stats.cubes_per_level.iter().enumerate() {
        line(format!("  level {l}: {n} cubes"));
    }
    line(format!(
        "bodies: {}, particles: {}",
        case.bodies.len(),
        case.particle_count()
    ));
    line(format!(
        "ranks: {} x {} threads, cubes per rank {:?}",
        cfg.parallel.ranks,
        cfg.parallel.threads,
        dist.counts()
    ));
    line(format!(
        "time: {} steps of dt {} to t = {}, {:?}",
        cfg.time.steps(),
        cfg.time.dt,
        cfg.time.end_time,
        cfg.time.integrator
    ));
    line(format!(
        "overlap: {}, balance: {}",
        if cfg.parallel.overlap { "on" } else { "off" },
        if cfg.balance.enabled {
            format!(
                "every {} steps, kappa {}, gamma {}",
                cfg.balance.every, cfg.balance.kappa, cfg.balance.gamma
            )
        } else {
            "off".into()
        }
    ));
    line(format!(
        "output: {} (forces every {} steps, checkpoints {})",
        cfg.output.dir.display(),
        cfg.output.force_every,
        if cfg.output.checkpoint_every > 0 {
            format!(
                "every {} steps, {:?}",
                cfg.output.checkpoint_every, cfg.output.checkpoint_mode
            )
        } else {
            "off".into()
        }
    ));
    if let Some(r) = &opts.restart {
        line(format!("restart from {}", r.display()));
    }
    Ok(s)
}
