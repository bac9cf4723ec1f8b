//! The `msf` command line: dataset ingestion, configuration and the
//! train / eval / purity / bench-bank commands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod rundir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, RunConfig};
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

pub const THREADS_ENV: &str = "MSF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "msf", version, about = "Mean-shift self-supervised learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder pair and write checkpoints under runs/<name>.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// kNN and linear-probe accuracy of the online backbone.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// nn, linear or all (eval.which).
        #[arg(long)]
        which: Option<String>,
        /// Checkpoint path, `latest` or `random-init` (eval.checkpoint).
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Label purity of nearest neighbours in a rebuilt target bank.
    Purity {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Neighbours per query, at least 2 (purity.k).
        #[arg(long)]
        k: Option<String>,
        /// Checkpoint path, `latest` or `random-init` (purity.checkpoint).
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Throughput and FLOPs of exact top-k search.
    BenchBank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        capacity: Option<String>,
        #[arg(long)]
        dim: Option<String>,
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        queries: Option<String>,
    },
}

fn config(args: &ConfigArgs, shorthand: &[(&str, &Option<String>)]) -> CliResult<RunConfig> {
    let mut overrides: Vec<(String, String)> = args.set.iter().map(|s| parse_override(s)).collect::<CliResult<_>>()?;
    overrides.extend(
        shorthand
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
    );
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // Fails only if a pool already exists (repeated in-process calls).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Train { cfg } => commands::cmd_train(&config(&cfg, &[])?),
        Command::Eval { cfg, which, checkpoint } => {
            let c = config(&cfg, &[("eval.which", &which), ("eval.checkpoint", &checkpoint)])?;
            commands::cmd_eval(&c).map(drop)
        }
        Command::Purity { cfg, k, checkpoint } => {
            let c = config(&cfg, &[("purity.k", &k), ("purity.checkpoint", &checkpoint)])?;
            commands::cmd_purity(&c).map(drop)
        }
        Command::BenchBank { cfg, capacity, dim, k, queries } => {
            let c = config(
                &cfg,
                &[
                    ("bench.capacity", &capacity),
                    ("bench.dim", &dim),
                    ("bench.k", &k),
                    ("bench.queries", &queries),
                ],
            )?;
            commands::cmd_bench_bank(&c).map(drop)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("msf: {e}");
            e.exit_code()
        }
    }
}
