//! `densemarks`: synthesize data, train embedders and run the canonical-map
//! tools from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] densemarks::Error),
}

impl CliError {
    /// 2 usage, 3 input format, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use densemarks::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.root() {
                E::InvalidArgument(_) => 2,
                E::Format { .. } | E::OutOfCube { .. } => 3,
                E::DegenerateFeature { .. }
                | E::NonFinite(_)
                | E::TooFewTracks { .. }
                | E::EmptyFrame
                | E::EmptyForeground
                | E::Degenerate(_)
                | E::PointAtInfinity(_)
                | E::EmptyResidual => 4,
                E::Io(_) | E::InFile { .. } => 1,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "densemarks", version, about = "Dense canonical head correspondences")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Render synthetic sequences with tracks, landmarks and labels.
    Synth,
    /// Train an embedder on synthesized sequences.
    Train,
    /// Predict a UVW map for one image.
    Embed,
    /// Warp a source image onto a target through nearest canonical matches.
    Warp,
    /// Locate an annotated point and its neighbourhood in other maps.
    Query,
    /// Reconstruct a colored point cloud from calibrated views.
    Triangulate,
    /// Fit a rigid template pose to one UVW map.
    Fit,
    /// Matching error of a checkpoint on held-out sequences.
    Eval,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();

    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let result = RunConfig::load(cli.config.as_deref(), &overrides)
        .and_then(|cfg| commands::run(cli.command, &cfg, &cli.out));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
