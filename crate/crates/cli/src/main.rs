//! `til`: run braking scenarios, compare TiL with the stand-alone MPC,
//! calibrate sensor noise, tune controllers and benchmark step times.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "til", version, about = "Twin-in-the-loop braking control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Scenario preset name or config file.
    #[arg(long, default_value = "nominal")]
    pub scenario: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// `key=value` config override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one controller on a scenario; writes the time series and indices.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "til")]
        controller: String,
        /// Noise seed (overrides scenario.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run TiL and the MPC baseline on the same scenario and seed.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to look for tuning overlays (defaults to --out).
        #[arg(long)]
        tuning_dir: Option<PathBuf>,
    },
    /// Scale the speed and encoder noise to reach a target slip SNR on the
    /// training maneuver.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4.0)]
        snr: f64,
        /// Number of noise seeds pooled in the estimate.
        #[arg(long, default_value_t = 8)]
        seeds: u64,
    },
    /// Bayesian optimization of the compensator (`til`) or of the baseline
    /// predictor (`mpc-eol`) on the training maneuver.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "til")]
        target: String,
        #[arg(long, default_value_t = 40)]
        budget: usize,
        /// Optimizer seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Per-step compute time of the controller and twin blocks.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            common,
            controller,
            seed,
        } => commands::run(&common, &controller, seed),
        Command::Compare {
            common,
            seed,
            tuning_dir,
        } => commands::compare(&common, seed, tuning_dir),
        Command::Calibrate { common, snr, seeds } => commands::calibrate(&common, snr, seeds),
        Command::Tune {
            common,
            target,
            budget,
            seed,
        } => commands::tune(&common, &target, budget, seed),
        Command::Bench { common, repetitions } => commands::bench(&common, repetitions),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
