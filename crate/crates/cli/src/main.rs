use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Adaptive SMC source estimation for single MEG topographies.
#[derive(Debug, Parser)]
#[command(name = "dipole-asmc", version)]
struct Cli {
    /// JSON configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Overrides adapt.n_particles.
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// Overrides suite.n_groups.
    #[arg(long, global = true)]
    groups: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the source grid and sensor array and write the lead field.
    Leadfield {
        /// Output directory for leadfield.bin, grid.csv and sensors.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a synthetic benchmark suite.
    Gen {
        #[arg(long)]
        leadfield: PathBuf,
        #[arg(long, default_value = "suite")]
        out: PathBuf,
    },
    /// Run the sampler on one topography.
    Sample {
        topography: PathBuf,
        #[arg(long)]
        leadfield: PathBuf,
        /// Result JSON; the history CSV is written next to it.
        #[arg(long, default_value = "sample.json")]
        out: PathBuf,
    },
    /// Run and score the sampler on every topography of a suite.
    Bench {
        suite: PathBuf,
        #[arg(long)]
        leadfield: PathBuf,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        /// Keep rows already present in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score an estimate against a ground-truth configuration.
    Eval {
        estimate: PathBuf,
        truth: PathBuf,
        #[arg(long)]
        leadfield: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
