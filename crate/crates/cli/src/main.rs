//! `patepp`: private knowledge-transfer experiments from JSON configs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patepp_cli::{cmd_audit_privacy, cmd_run, cmd_sweep_param, cmd_sweep_sigma, exit_code};

#[derive(Parser)]
#[command(name = "patepp", about = "Teacher-ensemble private labeling and robust student training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: config's out_dir, else cwd).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep the answer-noise sigma; writes curves.csv.
    SweepSigma {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sigma values (at least 2).
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Seeds to average per point.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Sweep beta or tau; writes table.csv.
    SweepParam {
        #[arg(long)]
        config: PathBuf,
        /// Which knob to sweep: beta or tau.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Seeds to average per point.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Convert a stored privacy ledger at one or more deltas; writes table.csv.
    AuditPrivacy {
        /// Serialized ledger (ledger.json from a run).
        #[arg(long)]
        ledger: PathBuf,
        /// Comma-separated delta values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out, seed } => {
            cmd_run(config, out.as_deref(), *seed).map(|dir| {
                println!("report written to {}", dir.display());
            })
        }
        Command::SweepSigma { config, values, out, seed, seeds } => {
            cmd_sweep_sigma(config, values, out.as_deref(), *seed, *seeds).map(|path| {
                println!("curves written to {}", path.display());
            })
        }
        Command::SweepParam { config, param, values, out, seed, seeds } => {
            cmd_sweep_param(config, param, values, out.as_deref(), *seed, *seeds).map(|path| {
                println!("table written to {}", path.display());
            })
        }
        Command::AuditPrivacy { ledger, values, out } => {
            cmd_audit_privacy(ledger, values, out.as_deref()).map(|path| {
                println!("table written to {}", path.display());
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
