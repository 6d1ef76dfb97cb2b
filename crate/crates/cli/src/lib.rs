//! The `flowse` command line: dataset generation, training, enhancement,
//! the analytic self-check and NFE sweeps.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime failure, 3 verification failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod data;

pub use config::Config;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verify(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
        move |e| CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<flowse_core::Error> for CliError {
    fn from(e: flowse_core::Error) -> Self {
        use flowse_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::ColaViolation(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "flowse",
    version,
    about = "Flow matching speech enhancement on synthetic data",
    after_help = "Run `flowse keys` for the list of config keys."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file of `[section]` headers and `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (same as `--set run.seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Solver steps (same as `--set enhance.nfe=N`).
    #[arg(long, global = true)]
    pub nfe: Option<usize>,
    /// fm, pfode or eum (same as `--set enhance.sampler=S`).
    #[arg(long, global = true)]
    pub sampler: Option<String>,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write train/valid/test WAV pairs and manifests.
    GenData,
    /// Train a model; writes best/last checkpoints and a log.
    Train,
    /// Enhance a WAV file or every file of a manifest.
    Enhance,
    /// Run the analytic self-check suite.
    Verify,
    /// SI-SDR over samplers and NFE on a manifest.
    Bench,
    /// Print every config key with its default.
    Keys,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Enhance => "enhance",
            Command::Verify => "verify",
            Command::Bench => "bench",
            Command::Keys => "keys",
        }
    }

    fn default_out(&self) -> &'static str {
        match self {
            Command::GenData => "data",
            Command::Train => "run",
            Command::Enhance => "enhanced",
            Command::Verify => "verify",
            Command::Bench => "bench",
            Command::Keys => ".",
        }
    }
}

/// Resolved config plus the output directory.
pub fn resolve(cli: &Cli) -> Result<(Config, PathBuf), CliError> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(format!("run.seed={s}"));
    }
    if let Some(n) = cli.nfe {
        overrides.push(format!("enhance.nfe={n}"));
    }
    if let Some(s) = &cli.sampler {
        overrides.push(format!("enhance.sampler={s}"));
    }
    overrides.extend(cli.overrides.iter().cloned());
    let cfg = Config::resolve(cli.config.as_deref(), &overrides)?;
    let out = match (&cli.out, cli.command) {
        (Some(o), _) => o.clone(),
        (None, Command::GenData) => PathBuf::from(cfg.str("data.dir")),
        (None, c) => PathBuf::from(c.default_out()),
    };
    Ok((cfg, out))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let (cfg, out) = resolve(cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &out),
        Command::Train => commands::train(&cfg, &out).map(|_| ()),
        Command::Enhance => commands::enhance(&cfg, &out).map(|_| ()),
        Command::Verify => commands::verify(&cfg, &out),
        Command::Bench => commands::bench(&cfg, &out).map(|_| ()),
        Command::Keys => {
            print!("{}", config::describe_keys());
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("flowse {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
