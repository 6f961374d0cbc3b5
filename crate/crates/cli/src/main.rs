//! `jordan-exit`: predictions, simulations and their comparison for
//! small-noise exit problems.
//!
//! Exit status: 0 success, 2 invalid configuration or input, 3 I/O
//! failure, 4 fewer than 99% of the trials of some noise level succeeded.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jordan_exit::simulate::SimOptions;

use crate::commands::SimulateArgs;
use crate::config::Config;

/// An error carrying the process exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn config_list(list: Vec<String>) -> Self {
        Self::config(list.join("\n"))
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

#[derive(Parser)]
#[command(name = "jordan-exit", version, about = "Exit problems near an unstable Jordan-block critical point")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the deterministic expansion terms and optional limit-law samples.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Also write this many sampled (ρ, η, sign) triples.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; JSON goes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate trials and write one records CSV per noise level.
    Simulate(SimFlags),
    /// Compare records with the limiting laws.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Records files; noise levels are taken from the records.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Number of limit-law draws.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Records come from outer-domain runs.
        #[arg(long)]
        outer: bool,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate every noise level of the grid, then analyze.
    Sweep {
        #[command(flatten)]
        sim: SimFlags,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

#[derive(Args, Clone)]
struct SimFlags {
    #[arg(long)]
    config: PathBuf,
    /// Single noise level instead of the config grid.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; JORDAN_EXIT_THREADS takes precedence when set.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run to the outer domain instead of the box of radius R.
    #[arg(long)]
    outer: bool,
    /// Record exits from the inner box; without a value the config alpha is used.
    #[arg(long, num_args = 0..=1)]
    alpha: Option<Option<f64>>,
    /// Check each step's midpoint for crossings (halves all step sizes).
    #[arg(long)]
    halve_steps: bool,
}

fn workers(flag: Option<usize>, cfg: &Config) -> Result<usize, Failure> {
    let from_env = match std::env::var("JORDAN_EXIT_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Failure::config(format!("JORDAN_EXIT_THREADS: cannot parse {v:?}")))?),
        Err(_) => None,
    };
    let n = from_env
        .or(flag)
        .or(cfg.run.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if n == 0 {
        return Err(Failure::config("workers must be at least 1"));
    }
    Ok(n)
}

fn simulate_args(flags: &SimFlags, cfg: &Config) -> Result<SimulateArgs, Failure> {
    let epsilons = match flags.epsilon {
        Some(e) if !(e > 0.0 && e < 1.0) => return Err(Failure::config(format!("--epsilon must lie in (0, 1), got {e}"))),
        Some(e) => vec![e],
        None => cfg.spec.epsilon_grid.clone(),
    };
    if flags.outer && cfg.problem.outer_half_width().is_none() {
        return Err(Failure::config("--outer needs an outer domain in the config"));
    }
    let options = SimOptions {
        outer: flags.outer,
        refine: flags.halve_steps,
        inner_alpha: flags.alpha.map(|a| a.unwrap_or(cfg.spec.alpha)),
        ..SimOptions::default()
    };
    Ok(SimulateArgs {
        epsilons,
        trials: flags.trials.or(cfg.run.trials).unwrap_or(1_000),
        seed: flags.seed.or(cfg.run.seed).unwrap_or(0),
        workers: workers(flags.workers, cfg)?,
        out_dir: flags.out.clone().or_else(|| cfg.run.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out")),
        options,
    })
}

fn status(healthy: bool) -> Result<(), Failure> {
    if healthy {
        Ok(())
    } else {
        Err(Failure { code: 4, message: "fewer than 99% of the trials succeeded".into() })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Predict { config, samples, seed, out } => {
            let cfg = config::load(&config)?;
            commands::predict(&cfg, samples, seed.or(cfg.run.seed).unwrap_or(0), out.as_deref())
        }
        Command::Simulate(flags) => {
            let cfg = config::load(&flags.config)?;
            let args = simulate_args(&flags, &cfg)?;
            let (_, healthy) = commands::simulate(&cfg, &args)?;
            status(healthy)
        }
        Command::Analyze { config, records, samples, seed, outer, out } => {
            let cfg = config::load(&config)?;
            let mut all = Vec::new();
            for p in &records {
                all.extend(commands::read_records_file(p, cfg.problem.dim())?);
            }
            let report = commands::analyze(&cfg, all, samples, seed.or(cfg.run.seed).unwrap_or(0), outer)?;
            match out {
                Some(p) => std::fs::write(&p, &report).map_err(|e| Failure::io(format!("{}: {e}", p.display()))),
                None => {
                    print!("{}", String::from_utf8_lossy(&report));
                    Ok(())
                }
            }
        }
        Command::Sweep { sim, samples } => {
            let cfg = config::load(&sim.config)?;
            let args = simulate_args(&sim, &cfg)?;
            let (cells, healthy) = commands::simulate(&cfg, &args)?;
            let all = cells.into_iter().flat_map(|(_, r)| r).collect();
            let report = commands::analyze(&cfg, all, samples, args.seed, args.options.outer)?;
            let path = args.out_dir.join("report.json");
            std::fs::write(&path, &report).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            status(healthy)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
