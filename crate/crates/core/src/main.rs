use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cubelet::cli::config::CaseConfig;
use cubelet::cli::exit_code;
use cubelet::cli::reports::{
    balance_report, balance_table, compress_bench, compress_table, mesh_stats,
};
use cubelet::cli::run::{plan, run_case, RunOptions};
use cubelet::cli::sphere::{validate_sphere, SphereCase};
use cubelet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cubelet",
    version,
    about = "Building-cube flow solver with immersed bodies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args)]
struct Common {
    /// Case file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ranks: Option<usize>,
    /// Worker threads per rank.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    overlap: Option<Switch>,
    #[arg(long, value_enum)]
    balance: Option<Switch>,
    /// Validate the configuration and print the plan without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a case to its end time.
    Run {
        #[command(flatten)]
        common: Common,
        /// Resume from a checkpoint.
        #[arg(long)]
        restart: Option<PathBuf>,
        /// Output folder (overrides the case file).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Flow past a sphere at Re = 100; checks the wake bubble.
    ValidateSphere {
        #[command(flatten)]
        common: Common,
        /// Override the end time.
        #[arg(long)]
        end_time: Option<f64>,
        /// Override the inflow speed (0 gives the no-flow control case).
        #[arg(long)]
        inflow: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Imbalance and time per step with and without balancing, per gamma.
    BalanceReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Leave the body out (nothing to balance).
        #[arg(long)]
        no_particles: bool,
    },
    /// Compression ratio and error per cube size and tolerance.
    CompressBench {
        #[command(flatten)]
        common: Common,
    },
    /// Mesh, particle and distribution statistics of a case.
    MeshStats {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn case(&self) -> Result<CaseConfig> {
        let mut cfg = match &self.config {
            Some(p) => CaseConfig::load(p)?,
            None => CaseConfig::default(),
        };
        if let Some(r) = self.ranks {
            cfg.parallel.ranks = r;
        }
        if let Some(t) = self.threads {
            cfg.parallel.threads = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = self.overlap {
            cfg.parallel.overlap = o.into();
        }
        if let Some(b) = self.balance {
            cfg.balance.enabled = b.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn sphere(&self) -> Result<SphereCase> {
        let mut case = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                SphereCase::from_toml(&text)?
            }
            None => SphereCase::default(),
        };
        if let Some(r) = self.ranks {
            case.ranks = r;
        }
        if let Some(t) = self.threads {
            case.threads = t;
        }
        if let Some(o) = self.overlap {
            case.overlap = o.into();
        }
        Ok(case)
    }

    fn threads(&self) -> usize {
        self.threads.unwrap_or(1)
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            common,
            restart,
            output,
            verbose,
        } => {
            let mut cfg = common.case()?;
            if let Some(o) = output {
                cfg.output.dir = o;
            }
            let opts = RunOptions {
                restart,
                verbose,
                ..Default::default()
            };
            print!("{}", plan(&cfg, &opts)?);
            if common.dry_run {
                return Ok(true);
            }
            let s = run_case(&cfg, &opts)?;
            println!(
                "finished at step {} (t = {}), {:.4} s/step, {} rebalances, {} checkpoints",
                s.final_step,
                s.t,
                s.seconds_per_step,
                s.rebalances,
                s.checkpoints.len()
            );
            if s.unconverged_steps > 0 {
                println!("warning: {} steps hit the V-cycle cap", s.unconverged_steps);
            }
            Ok(true)
        }
        Command::ValidateSphere {
            common,
            end_time,
            inflow,
            output,
            verbose,
        } => {
            let mut case = common.sphere()?;
            if let Some(t) = end_time {
                case.end_time = t;
            }
            if let Some(u) = inflow {
                case.inflow = u;
            }
            if let Some(o) = output {
                case.output = o;
            }
            let cfg = case.case_config();
            cfg.validate()?;
            let opts = RunOptions {
                verbose,
                ..Default::default()
            };
            print!("{}", plan(&cfg, &opts)?);
            if common.dry_run {
                return Ok(true);
            }
            let r = validate_sphere(&case, &opts)?;
            println!("t,L_b/D,x_c/D,y_c/D");
            for (t, m) in &r.probes {
                let c = m
                    .center
                    .map_or(",".into(), |c| format!("{:.4},{:.4}", c[0], c[1]));
                println!("{t:.3},{:.4},{c}", m.length);
            }
            print!("{}", r.table());
            Ok(r.passed())
        }
        Command::BalanceReport {
            common,
            steps,
            no_particles,
        } => {
            let ranks = common.ranks.unwrap_or(4);
            let gammas = [1.0, 2.0, 3.0, 4.0];
            println!(
                "clustered case, {ranks} ranks x {} threads, {steps} steps per timing, gamma in {gammas:?}",
                common.threads()
            );
            if common.dry_run {
                return Ok(true);
            }
            let rows = balance_report(ranks, common.threads(), steps, &gammas, !no_particles)?;
            print!("{}", balance_table(&rows));
            Ok(true)
        }
        Command::CompressBench { common } => {
            let cells = [4, 8, 16];
            let tols = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
            println!("cells per edge {cells:?}, relative tolerances {tols:?}");
            if common.dry_run {
                return Ok(true);
            }
            print!("{}", compress_table(&compress_bench(&cells, &tols)?));
            Ok(true)
        }
        Command::MeshStats { common } => {
            let cfg = common.case()?;
            if common.dry_run {
                print!("{}", plan(&cfg, &RunOptions::default())?);
                return Ok(true);
            }
            print!("{}", mesh_stats(&cfg)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // validation ran but did not meet its targets
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
