//! Command-line driver: argument parsing, config resolution and exit codes.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use invgrad::{Precision, StrategyId};

use crate::commands::Verdict;
use crate::config::Config;
use crate::manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "invgrad", version, about = "Gradient strategies for invertible networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: runs/<command>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Strategy, or a comma-separated list where the command takes several.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    pub strategy: Vec<StrategyId>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare every strategy with Backprop and Backprop with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Flip the sign of the inverse-Jacobian product of this trunk layer.
        #[arg(long)]
        inject_fault: Option<usize>,
    },
    /// Train a classifier and write the trace and the final checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Sweep strategies over depths and write the CSV report and charts.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Track each strategy's gradient error against an oracle during training.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Write the configured synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got `{s}`")),
    }
}

fn parse_strategy(s: &str) -> Result<StrategyId, String> {
    s.parse().map_err(|e: invgrad::Error| e.to_string())
}

/// An error that is the caller's fault, reported with exit code 2.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::Train { .. } => "train",
            Command::Bench { .. } => "bench",
            Command::Compare { .. } => "compare",
            Command::Dataset { command: DatasetCommand::Gen { .. } } => "dataset gen",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gradcheck { common, .. }
            | Command::Train { common, .. }
            | Command::Bench { common }
            | Command::Compare { common }
            | Command::Dataset { command: DatasetCommand::Gen { common } } => common,
        }
    }
}

fn single_strategy(list: &[StrategyId], command: &str) -> Result<Option<StrategyId>, Usage> {
    match list {
        [] => Ok(None),
        [s] => Ok(Some(*s)),
        _ => Err(Usage(anyhow::anyhow!("{command} takes a single --strategy"))),
    }
}

/// Applies flags on top of the file (or defaults). Returns the resolved config and the
/// seed of the command.
pub fn resolve(command: &Command) -> anyhow::Result<(Config, u64)> {
    resolve_inner(command).map_err(|u| u.0)
}

fn resolve_inner(command: &Command) -> Result<(Config, u64), Usage> {
    let c = command.common();
    let mut cfg = match &c.config {
        Some(p) => config::load(p).map_err(Usage)?,
        None => Config::default(),
    };
    let name = command.name();
    let seed = match command {
        Command::Gradcheck { inject_fault, .. } => {
            let g = &mut cfg.gradcheck;
            g.seed = c.seed.unwrap_or(g.seed);
            g.precision = c.precision.unwrap_or(g.precision);
            if !c.strategy.is_empty() {
                g.strategies = Some(c.strategy.clone());
            }
            if inject_fault.is_some() {
                g.inject_fault = *inject_fault;
            }
            g.seed
        }
        Command::Train { .. } => {
            let t = &mut cfg.train;
            t.seed = c.seed.unwrap_or(t.seed);
            t.precision = c.precision.unwrap_or(t.precision);
            if let Some(s) = single_strategy(&c.strategy, name)? {
                t.strategy = s;
            }
            t.seed
        }
        Command::Bench { .. } => {
            if c.precision == Some(Precision::F32) {
                return Err(Usage(anyhow::anyhow!("bench runs in f64 only")));
            }
            let b = &mut cfg.bench;
            b.seed = c.seed.unwrap_or(b.seed);
            if !c.strategy.is_empty() {
                b.strategies = c.strategy.clone();
            }
            b.seed
        }
        Command::Compare { .. } => {
            let k = &mut cfg.compare;
            k.seed = c.seed.unwrap_or(k.seed);
            k.precision = c.precision.unwrap_or(k.precision);
            if !c.strategy.is_empty() {
                k.arms = c.strategy.clone();
            }
            k.seed
        }
        Command::Dataset { .. } => {
            if !c.strategy.is_empty() || c.precision.is_some() {
                return Err(Usage(anyhow::anyhow!("dataset gen takes neither --strategy nor --precision")));
            }
            cfg.data.seed = c.seed.unwrap_or(cfg.data.seed);
            cfg.data.seed
        }
    };
    commands::validate(&cfg, name).map_err(Usage)?;
    Ok((cfg, seed))
}

fn execute(command: &Command, log: &mut dyn Write) -> Result<Verdict, Usage> {
    let (cfg, seed) = resolve_inner(command)?;
    let c = command.common();
    let name = command.name();
    let out = c.out.clone().unwrap_or_else(|| Path::new("runs").join(name.replace(' ', "-")));
    let manifest = RunManifest {
        command: name.to_string(),
        config_path: c.config.clone(),
        config: cfg.clone(),
        seed,
        outdir: out.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    manifest.write(&out).map_err(Usage)?;
    let mut run = || -> anyhow::Result<Verdict> {
        match command {
            Command::Gradcheck { .. } => commands::gradcheck(&cfg.gradcheck, &out, log),
            Command::Train { init, .. } => {
                let echo = serde_json::to_string(&cfg)?;
                commands::train(&cfg.train, &cfg.data, init.as_deref(), &echo, &out, log)
            }
            Command::Bench { .. } => commands::bench(&cfg.bench, &out, log).map(|_| Verdict::Pass),
            Command::Compare { .. } => commands::compare(&cfg.compare, &cfg.data, &out, log).map(|_| Verdict::Pass),
            Command::Dataset { .. } => commands::dataset_gen(&cfg.data, &out, log).map(|_| Verdict::Pass),
        }
    };
    match run() {
        Ok(v) => Ok(v),
        Err(e) => {
            let _ = writeln!(log, "error: {e:#}");
            Ok(Verdict::Fail)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, log: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command, log) {
        Ok(Verdict::Pass) => EXIT_OK,
        Ok(Verdict::Fail) => EXIT_FAILURE,
        Err(Usage(e)) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}
