//! The `anobfn` command line: `simulate`, `train`, `infer` and `eval`.
//!
//! Each command is also callable as a function so tests can drive the whole
//! pipeline in-process.

mod eval;
mod infer;
mod simulate;
mod train;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anobfn_core::{Error, InferenceMode, RunConfig};
use clap::{Parser, Subcommand};

pub use eval::cmd_eval;
pub use infer::{cmd_infer, output_stem, InferOutcome};
pub use simulate::cmd_simulate;
pub use train::{cmd_train, TrainOutcome, TRAIN_LOG};

pub const METRICS_FILE: &str = "metrics.csv";

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit code 1).
    Usage(String),
    /// Failure while running (exit code 2).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "anobfn",
    version,
    about = "Bayesian-flow anomaly detection on phantom images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON run configuration; defaults are used for anything omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Write into an existing non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the denoiser on the healthy training split, resuming from the
    /// latest checkpoint in `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct every test image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// bfn_vanilla, anobfn_no_c2 or anobfn (default: from the config).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score reconstructions against the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads and validates the configuration.
pub fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default().with_seed(0),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_mode(s: &str) -> CliResult<InferenceMode> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

/// Caps the global thread pool at `ANOBFN_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("ANOBFN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("ANOBFN_THREADS must be a positive integer, got `{value}`")))?;
    // a pool that is already running keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub(crate) fn runtime(context: impl fmt::Display) -> impl FnOnce(Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Runs a parsed command and returns a one-line summary.
pub fn execute(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Simulate { common, out, force } => {
            let cfg = load_config(&common)?;
            let n = cmd_simulate(&cfg, &out, force)?;
            Ok(format!("wrote {n} subjects to {}", out.display()))
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common)?;
            let o = cmd_train(&cfg, &data, &out)?;
            Ok(format!(
                "trained to step {} (last loss {:.4})",
                o.final_step, o.last_loss
            ))
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            mode,
            out,
        } => {
            let mode = mode.as_deref().map(parse_mode).transpose()?;
            let cfg = load_config(&common)?;
            let o = cmd_infer(&cfg, &checkpoint, &data, mode, &out)?;
            Ok(format!("reconstructed {} images with {}", o.n_images, o.mode.name()))
        }
        Command::Eval {
            common,
            pred,
            data,
            out,
        } => {
            let cfg = load_config(&common)?;
            let report = cmd_eval(&cfg, &pred, &data, &out)?;
            Ok(format!(
                "scored {} images into {}",
                report.records.len(),
                out.join(METRICS_FILE).display()
            ))
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = init_threads().and_then(|()| execute(cli));
    match result {
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
