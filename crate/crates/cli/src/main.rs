//! `ibfp` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failures with a stable exit code; anything else exits with 3.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("no inputs: {0}")]
    NoInputs(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

const EXIT_EMPTY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ibfp", version, about = "Camera fingerprints with an information bottleneck, and splice localization")]
pub struct Cli {
    /// TOML config; missing sections keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "IBFP_OUT", default_value = "ibfp-out")]
    pub out: PathBuf,
    /// Process images one at a time on the calling thread.
    #[arg(long, global = true)]
    pub single_thread: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the camera dataset and the splice benchmark.
    Synth,
    /// Train one model.
    Train {
        /// Dataset root; defaults to `<out>/dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train one model per beta and merge their rate/distortion points.
    Sweep {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated; overrides `[sweep] betas`.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Write a splice heat map for one PNG or every PNG under a directory.
    Localize {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
    },
    /// Score heat maps against ground-truth masks.
    Evaluate {
        /// Defaults to `<out>/heatmaps`.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        /// Defaults to `<out>/dataset/splices`.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Row label in the text table.
        #[arg(long, default_value = "model")]
        label: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(match e.downcast_ref::<CliError>() {
                Some(CliError::NoInputs(_)) => EXIT_EMPTY,
                Some(CliError::InvalidConfig(_)) => EXIT_CONFIG,
                None => match e.downcast_ref::<ibfp::Error>() {
                    Some(ibfp::Error::Config(_)) => EXIT_CONFIG,
                    Some(ibfp::Error::Empty(_)) => EXIT_EMPTY,
                    _ => EXIT_FAILURE,
                },
            })
        }
    }
}
