//! Command-line front end: binds experiment configuration files to training
//! runs and analyses and writes their results as CSV and JSON.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use iseat_core::nd::Precision;

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] iseat_core::Error),
}

impl CliError {
    /// 2 for numerical failures during a run, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "iseat",
    version,
    about = "Adversarial training with instance-adaptive smoothness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, checkpoints and the resolved config.
    Train(Common),
    /// Clean and robust accuracy of a checkpoint.
    Attack(WithCheckpoint),
    /// Per-sample margins along the attack direction.
    Margin(WithCheckpoint),
    /// Loss grid around one held-out sample.
    Landscape(WithCheckpoint),
    /// Adversarial vulnerability statistics on the training split.
    Analyze(WithCheckpoint),
    /// Train several configs over several seeds and tabulate the final epochs.
    Compare {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to each config's own seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
        .map_err(|_| format!("expected f32 or f64, got {s:?}"))
}

fn load(
    path: &Path,
    seed: Option<u64>,
    precision: Option<Precision>,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(p) = precision {
        cfg.run.precision = p;
    }
    Ok(cfg)
}

/// Worker count from `ISEAT_THREADS`; unset or 0 means one per available core.
pub fn thread_limit() -> Result<usize, CliError> {
    let auto = || std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("ISEAT_THREADS") {
        Err(_) => Ok(auto()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(auto()),
            Ok(n) => Ok(n),
            Err(_) => Err(CliError::Config(format!(
                "ISEAT_THREADS: expected a non-negative integer, got {v:?}"
            ))),
        },
    }
}

macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.run.precision {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

/// Runs one parsed command and returns its one-line summary.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c.config, c.seed, c.precision)?;
            let out = commands::default_out(&cfg, c.out.as_ref())?;
            dispatch!(cfg, train(&cfg, &out))
        }
        Command::Attack(w) => {
            with_checkpoint(w, |cfg, ck, out| dispatch!(cfg, attack(cfg, ck, out)))
        }
        Command::Margin(w) => {
            with_checkpoint(w, |cfg, ck, out| dispatch!(cfg, margin(cfg, ck, out)))
        }
        Command::Landscape(w) => {
            with_checkpoint(w, |cfg, ck, out| dispatch!(cfg, landscape(cfg, ck, out)))
        }
        Command::Analyze(w) => {
            with_checkpoint(w, |cfg, ck, out| dispatch!(cfg, analyze(cfg, ck, out)))
        }
        Command::Compare {
            configs,
            out,
            seeds,
            precision,
        } => {
            let cfgs = configs
                .iter()
                .map(|p| load(p, None, precision))
                .collect::<Result<Vec<_>, _>>()?;
            let seeds: Vec<Option<u64>> = if seeds.is_empty() {
                vec![None]
            } else {
                seeds.into_iter().map(Some).collect()
            };
            commands::compare(&cfgs, &seeds, thread_limit()?, &out)
        }
    }
}

fn with_checkpoint(
    w: WithCheckpoint,
    f: impl FnOnce(&ExperimentConfig, &Path, &Path) -> Result<String, CliError>,
) -> Result<String, CliError> {
    let cfg = load(&w.common.config, w.common.seed, w.common.precision)?;
    let out = commands::default_out(&cfg, w.common.out.as_ref())?;
    f(&cfg, &w.checkpoint, &out)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
