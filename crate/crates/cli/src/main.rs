use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use log::error;
use renewscen::config::RunConfig;
use renewscen::pipeline::Workspace;

#[derive(Parser)]
#[command(name = "renewscen", version, about = "Probabilistic renewable generation scenarios")]
struct Cli {
    /// Run configuration (TOML). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use upstream artifacts even if their inputs changed.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic asset table, series and truth record.
    Synth,
    /// Fit per-asset meta models.
    Metacalibrate,
    /// Calibrate every asset for one target date.
    Calibrate {
        #[arg(long)]
        date: NaiveDate,
    },
    /// Build hierarchies and correlation blocks for a date.
    Cluster {
        #[arg(long)]
        date: NaiveDate,
    },
    /// Draw scenarios for a date.
    Simulate {
        #[arg(long)]
        date: NaiveDate,
        /// Number of scenarios (default from config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score stored scenarios against actuals over a date range.
    Assess {
        #[arg(long)]
        from: NaiveDate,
        #[arg(long)]
        to: NaiveDate,
    },
}

fn workspace(cli: &Cli) -> anyhow::Result<Workspace> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => {
            let cfg = RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, base)
        }
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(Workspace::new(cfg, base, cli.force))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ws = workspace(&cli)?;
    match cli.command {
        Command::Synth => print_paths(&ws.synth()?),
        Command::Metacalibrate => print_paths(&ws.metacalibrate()?),
        Command::Calibrate { date } => {
            let out = ws.calibrate(date)?;
            print_paths(&out.written);
            if !out.failures.is_empty() {
                for (id, e) in &out.failures {
                    error!("{id}: {e}");
                    eprintln!("failed {id}: {e}");
                }
                bail!("{} of {} assets failed", out.failures.len(), out.failures.len() + out.written.len());
            }
        }
        Command::Cluster { date } => print_paths(&ws.cluster(date)?),
        Command::Simulate { date, n } => print_paths(&ws.simulate(date, n)?),
        Command::Assess { from, to } => print_paths(&ws.assess(from, to)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
