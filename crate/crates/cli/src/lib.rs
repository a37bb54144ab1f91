//! `rvernet-lab`: dataset generation, training, evaluation, perturbation
//! studies, ablations and GradCAM from one JSON config.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rvernet_core::model::Branch;

pub use config::{ExperimentConfig, Precision};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rvernet-lab", version, about = "Dual-branch ROI / extra-ROI classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BranchArg {
    Roi,
    Xroi,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Roi => Branch::Roi,
            BranchArg::Xroi => Branch::Xroi,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write it as PNGs plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured model; writes a checkpoint, history and metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Top-1 decline of a checkpoint under the configured perturbations.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train roi_only, xroi_only and both with shared seeds and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// GradCAM heatmaps of CNN branches for the given samples.
    Gradcam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample ids or dataset indices, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<String>,
        /// Restrict to one branch; default is every branch the model uses.
        #[arg(long, value_enum)]
        branch: Option<BranchArg>,
    },
    /// Comparison table and aggregated declines over finished run directories.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories holding `metrics.json` and optionally `decline.json`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Parses `args` and runs the command, reporting errors on stderr.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
