//! `powertrack`: dual-domain transmit-power allocation for control
//! loops sharing a fading channel, with built-in reference checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use powertrack_cli::{cmd_diagnose, cmd_oracle, cmd_selftest, cmd_simulate, CliError, Overrides};

#[derive(Parser)]
#[command(
    name = "powertrack",
    version,
    about = "Tracks optimal transmit-power duals for control loops over a fading channel"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the tracking experiment and write a CSV trace.
    Simulate {
        /// Config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip the per-epoch reference solves (blank oracle cells).
        #[arg(long)]
        no_oracle: bool,
    },
    /// Evaluate the tracking conditions on a short calibration run.
    Diagnose {
        /// Config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Calibration length (default: config epochs, capped at 12).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Solve one epoch's sampled problem to reference accuracy.
    Oracle {
        /// Config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Epoch whose channel law to sample.
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-check the analytic paths against finite differences and
    /// brute force.
    Selftest,
}

fn run(cli: Cli) -> Result<Option<String>, CliError> {
    match cli.cmd {
        Cmd::Simulate { config, out, seed, epochs, no_oracle } => {
            let ov = Overrides { seed, epochs, no_oracle };
            let summary = cmd_simulate(&config, &out, &ov)?;
            Ok((!cli.quiet).then_some(summary))
        }
        Cmd::Diagnose { config, seed, epochs } => {
            let ov = Overrides { seed, epochs, no_oracle: false };
            let report = cmd_diagnose(&config, &ov)?;
            Ok(Some(report))
        }
        Cmd::Oracle { config, epoch, seed } => {
            let ov = Overrides { seed, epochs: None, no_oracle: false };
            let report = cmd_oracle(&config, epoch, &ov)?;
            Ok(Some(report))
        }
        Cmd::Selftest => {
            let report = cmd_selftest()?;
            Ok((!cli.quiet).then_some(report))
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Bad invocations are config errors, not runtime failures.
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(Some(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
