//! `introvac`: train, edit and sample variational classifiers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments, 3 training diverged.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use introvac::trainer::Mode;

#[derive(Debug, Parser)]
#[command(name = "introvac", version, about = "Variational classifier training, attribute editing and sampling")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model checkpoint; for `train`, resume from it.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Vac,
    Introvac,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vac => Mode::Vac,
            ModeArg::Introvac => Mode::Introvac,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderArg {
    /// Block-averaged pixels.
    Pixels,
    /// Posterior means of the checkpoint's own encoder.
    ClassifierFeatures,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file (or resume with --checkpoint).
    Train,
    /// Encode and decode images.
    Reconstruct {
        /// Image file or directory of images.
        #[arg(long)]
        input: PathBuf,
    },
    /// Move images along attribute directions and write triptychs.
    Manipulate {
        #[arg(long)]
        input: PathBuf,
        /// `name=value`, e.g. `glasses=+3`; without a value the default shift is used.
        #[arg(long = "delta")]
        deltas: Vec<String>,
        /// `name=label`: grow the shift until the edited image is classified as `label`.
        #[arg(long, conflicts_with = "deltas")]
        auto: Option<String>,
    },
    /// Decode draws from the prior.
    Generate {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Sample latents conditioned on attribute labels.
    LangevinSample {
        /// `name=0|1`, one per attribute.
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
        #[arg(long, default_value_t = 0.0002)]
        alpha: f64,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        chains: usize,
        /// Keep samples the classifier does not assign to the target.
        #[arg(long)]
        no_reject: bool,
    },
    /// Reconstruction FID, L1 error and classifier accuracy.
    Evaluate {
        /// CelebA-layout directory to evaluate on instead of the config's test split.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EmbedderArg::Pixels)]
        embedder: EmbedderArg,
    },
    /// Write a synthetic dataset in CelebA layout.
    SynthData {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 2)]
        attributes: usize,
        #[arg(long, default_value_t = 0.0)]
        correlation: f64,
    },
}

/// Bad configuration or arguments (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use introvac::error::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence { .. } => 3,
                E::InvalidInput(_) | E::Parse { .. } | E::DegenerateDirection { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
