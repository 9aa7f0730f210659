//! `maze`: calibration, staged learning, evaluation, agent playback, the
//! session server, and export of plot-ready tables.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "maze",
    version,
    about = "Model-based control of a marble in a circular maze"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Model snapshot of a learning run: CMA-ES, CMA-ES+GP1, ... (also gp1, 1).
    #[arg(long, global = true, value_name = "LABEL")]
    pub stage: Option<String>,
    /// Run without streaming live state.
    #[arg(long, global = true)]
    pub headless: bool,
    /// Validate the configuration and report what would run; write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate the engine's friction on random-policy data.
    Calibrate,
    /// Run the staged learning experiment.
    Learn,
    /// Evaluate a stage snapshot on the evaluation seeds.
    Eval,
    /// Play one agent episode in real time.
    PlayAgent,
    /// Serve human and agent sessions over a websocket.
    Serve {
        /// Listen address, overriding the configuration.
        #[arg(long, value_name = "HOST:PORT")]
        address: Option<String>,
    },
    /// Export plot-ready CSV tables from a learning run.
    Export,
}

/// Exit status 1: bad usage.
pub const EXIT_USAGE: u8 = 1;
/// Exit status 2: the run failed.
pub const EXIT_FAILURE: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("maze: {e}");
            ExitCode::from(e.code())
        }
    }
}
