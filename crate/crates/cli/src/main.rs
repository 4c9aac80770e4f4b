mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spiketok::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "spiketok", version, about = "Event-driven spiking token selection engine")]
struct Cli {
    /// Flat `key = value` pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: `io.output` from the config, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Keep exactly this many tokens instead of the learned policy.
    #[arg(long = "fixed-k", global = true)]
    fixed_k: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic event recordings.
    Synth {
        /// Generate labelled samples of a synthetic task instead of moving bars.
        #[arg(long)]
        task: Option<String>,
        /// Write `t,x,y,p` CSV instead of SPK1 binary.
        #[arg(long)]
        csv: bool,
    },
    /// Run the encoder on one recording and dump per-token cues.
    Encode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Classify one recording and dump scores, mask and op counts.
    Infer {
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on the configured synthetic task.
    Train,
    /// Attention-stage MAC scaling over a K sweep.
    Profile {
        /// Comma-separated K values (default: N/8, N/4, N/2, N).
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        /// Synthetic samples for the mean dynamic sparsity (0 skips it).
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Spatial variance of first-spike timing and spike intervals.
    Variance {
        /// Event files or directories of event files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also report a homogeneous encoder built from the same seed.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rate, attention and mask images plus a spike-count curve.
    DumpMaps {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fast invariant suite.
    Selftest {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Load this checkpoint first and fail if it is unreadable.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// A library error, tagged with the stage that raised it.
    Core {
        stage: &'static str,
        err: spiketok::error::Error,
    },
    Usage(String),
    Io {
        path: PathBuf,
        err: std::io::Error,
    },
    SelftestFailed(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core { err, .. } if err.is_validation() => 1,
            CliError::Usage(_) => 1,
            CliError::Core { .. } | CliError::Io { .. } => 2,
            CliError::SelftestFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core { stage, err } => write!(f, "{stage}: {err}"),
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Io { path, err } => write!(f, "{}: {err}", path.display()),
            CliError::SelftestFailed(n) => write!(f, "{n} selftest check(s) failed"),
        }
    }
}

pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for spiketok::error::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|err| CliError::Core { stage, err })
    }
}

/// Resolved global settings shared by every subcommand.
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).stage("config")?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.fixed_k.is_some() {
        config.train.fixed_k = cli.fixed_k;
        config.validate().stage("config")?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Context { config, out })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = context(&cli)?;
    match cli.command {
        Command::Synth { task, csv } => commands::synth(&ctx, task.as_deref(), csv),
        Command::Encode { input, checkpoint } => commands::encode(&ctx, &input, checkpoint.as_deref()),
        Command::Infer { input, checkpoint } => commands::infer(&ctx, &input, checkpoint.as_deref()),
        Command::Train => commands::train(&ctx),
        Command::Profile {
            sweep,
            samples,
            checkpoint,
        } => commands::profile(&ctx, &sweep, samples, checkpoint.as_deref()),
        Command::Variance {
            inputs,
            compare,
            checkpoint,
        } => commands::variance(&ctx, &inputs, compare, checkpoint.as_deref()),
        Command::DumpMaps { inputs, checkpoint } => commands::dump_maps(&ctx, &inputs, checkpoint.as_deref()),
        Command::Selftest { filter, checkpoint } => commands::selftest(filter.as_deref(), checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
