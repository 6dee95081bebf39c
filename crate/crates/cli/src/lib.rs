//! `lotseg`: the pipeline as one subcommand per stage.
//!
//! ```text
//! lotseg phantom          --out data
//! lotseg train-reg        --data data --out tracker
//! lotseg sample-posterior --checkpoint tracker --data data --out ensemble
//! lotseg uncertainty      --ensemble ensemble --data data --out maps
//! lotseg train-seg        --data data --maps maps --out seg
//! lotseg predict          --model seg --data data --maps maps --out pred
//! lotseg evaluate         --predictions pred --data data --out report
//! ```
//!
//! Exit codes: 0 success, 2 validation error (bad config, missing or
//! mismatched upstream artifact), 3 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod provenance;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::MissingArtifact(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<lotseg_core::Error> for CliError {
    fn from(e: lotseg_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lotseg", version, about = "Loss-of-tracking guided cine segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed, overriding the config and LOTSEG_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cine phantom.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// Train the registration network.
    TrainReg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw a posterior ensemble of tracker weights.
    SamplePosterior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute u_b and u_s maps for every frame.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train baseline and dual-encoder segmentation ensembles.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        maps: PathBuf,
    },
    /// Segment the test split with both ensembles.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        maps: PathBuf,
    },
    /// Regional Dice, sigma_v and Wilcoxon report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom { common }
            | Command::TrainReg { common, .. }
            | Command::SamplePosterior { common, .. }
            | Command::Uncertainty { common, .. }
            | Command::TrainSeg { common, .. }
            | Command::Predict { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }
}

/// Parses `args` (program name first) and runs the command with the given
/// environment. Returns the process exit code.
pub fn run<I, T>(args: I, env: &std::collections::BTreeMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command, env: &std::collections::BTreeMap<String, String>) -> Result<(), CliError> {
    let common = cmd.common();
    let mut cfg = config::load_config(common.config.as_deref(), env)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = &common.out;
    match cmd {
        Command::Phantom { .. } => commands::cmd_phantom(&cfg, out),
        Command::TrainReg { data, .. } => commands::cmd_train_reg(&cfg, data, out),
        Command::SamplePosterior { checkpoint, data, .. } => commands::cmd_sample_posterior(&cfg, checkpoint, data, out),
        Command::Uncertainty { ensemble, data, .. } => commands::cmd_uncertainty(&cfg, ensemble, data, out),
        Command::TrainSeg { data, maps, .. } => commands::cmd_train_seg(&cfg, data, maps, out),
        Command::Predict { model, data, maps, .. } => commands::cmd_predict(&cfg, model, data, maps, out),
        Command::Evaluate { predictions, data, .. } => commands::cmd_evaluate(&cfg, predictions, data, out),
    }
}
