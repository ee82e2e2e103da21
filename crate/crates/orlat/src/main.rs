//! Command-line driver: one subcommand per experiment process, all fed by a
//! TOML config. Exit code 0 on success, 2 for config/usage problems, 3 for
//! runtime failures; the run summary is printed to stdout as JSON.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use orlat::harness::{self, ExperimentConfig, HarnessError, Process, RunOptions, RwalkMode};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "orlat",
    version,
    about = "Survival experiments for the contact process with random vertex weights on the oriented lattice"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores). Results are identical either way.
    #[arg(long)]
    jobs: Option<usize>,

    /// Also write replicas.csv with one row per replica outcome
    /// (branching, sir, and contact runs).
    #[arg(long)]
    log: bool,

    /// Pin every replica to the weight environment drawn from this seed
    /// (sir and contact runs).
    #[arg(long, value_name = "SEED")]
    quenched: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the mean-field fixed point θ(λ) and the limiting survival probability.
    Theta(Common),
    /// Iterate the extinction-profile fixed point F_d on a grid.
    Fgrid {
        #[command(flatten)]
        common: Common,
        /// Run only this dimension instead of the config's ds list.
        #[arg(long)]
        d: Option<u32>,
    },
    /// Estimate branching-process survival on the d-ary tree.
    Branching(Common),
    /// Estimate SIR generation-set survival on the oriented lattice.
    Sir(Common),
    /// Estimate contact-process survival on the oriented lattice.
    Contact(Common),
    /// Estimate the tree/lattice coupling success probability over ⌊σ ln d⌋ steps.
    Couple(Common),
    /// Estimate the extinction-probability gap at the coupled layer.
    Gap(Common),
    /// Random-walk collision statistics.
    Rwalk {
        #[command(subcommand)]
        mode: RwalkCommand,
    },
}

#[derive(Debug, Subcommand)]
enum RwalkCommand {
    /// Estimate P(τ₀ ≤ horizon) for each configured start pair.
    Collide(Common),
    /// Evaluate the survival lower bound over the configured start set.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Also write records.csv with one row per simulated collision record.
        #[arg(long)]
        dump: bool,
    },
}

impl Command {
    /// Split into the process, shared flags, and the flags only some
    /// subcommands carry.
    fn unpack(self) -> (Process, Common, RwalkMode, bool, Option<u32>) {
        match self {
            Command::Theta(c) => (Process::Theta, c, RwalkMode::default(), false, None),
            Command::Fgrid { common, d } => {
                (Process::Fgrid, common, RwalkMode::default(), false, d)
            }
            Command::Branching(c) => (Process::Branching, c, RwalkMode::default(), false, None),
            Command::Sir(c) => (Process::Sir, c, RwalkMode::default(), false, None),
            Command::Contact(c) => (Process::Contact, c, RwalkMode::default(), false, None),
            Command::Couple(c) => (Process::Couple, c, RwalkMode::default(), false, None),
            Command::Gap(c) => (Process::Gap, c, RwalkMode::default(), false, None),
            Command::Rwalk { mode } => match mode {
                RwalkCommand::Collide(c) => (Process::Rwalk, c, RwalkMode::Collide, false, None),
                RwalkCommand::Bound { common, dump } => {
                    (Process::Rwalk, common, RwalkMode::Bound, dump, None)
                }
            },
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (process, common, rwalk_mode, dump, fgrid_d) = cli.command.unpack();
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("building the worker pool")?;
    }
    let config = ExperimentConfig::from_toml_path(&common.config)?;
    if config.process != process {
        return Err(HarnessError::ConfigInvalid(format!(
            "config declares process \"{}\" but the \"{}\" subcommand was invoked",
            config.process.name(),
            process.name()
        ))
        .into());
    }
    let opts = RunOptions {
        out_dir: common.out,
        seed: common.seed,
        quenched: common.quenched,
        log: common.log,
        dump,
        rwalk_mode,
        fgrid_d,
    };
    let summary = harness::run_experiment(&config, &opts)?;
    let text = serde_json::to_string_pretty(&summary)?;
    // Tolerate a closed pipe (e.g. `orlat ... | head`) instead of panicking.
    use std::io::Write;
    if let Err(e) = writeln!(std::io::stdout().lock(), "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<HarnessError>(),
                Some(HarnessError::ConfigInvalid(_) | HarnessError::BadArguments(_))
            );
            ExitCode::from(if usage { 2 } else { 3 })
        }
    }
}
