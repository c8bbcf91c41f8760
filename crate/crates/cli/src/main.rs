mod commands;
mod error;
mod experiments;
mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::commands::{read_text, write_text, FcArgs, FiberArgs, FlowArgs, NtkArgs, Outcome, VerifyArgs};
use crate::error::{CliError, Result};
use crate::experiments::SuiteConfig;
use crate::report::ExperimentReport;

/// Geometry of neural tangent kernels for linear convolutional networks.
#[derive(Parser, Debug)]
#[command(name = "ntk-geom", version)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, env = "NTK_GEOM_SEED", default_value_t = 0, global = true)]
    seed: u64,
    /// Print machine-readable JSON instead of a summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rerun one of the worked examples and check its printed values.
    Reproduce {
        /// running-k1k2, singular-ntk-pair, stride-one-three-factorizations or fc-counterexample.
        id: String,
        /// Report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized test suites.
    Suite {
        /// Suite configuration JSON; all suites with default sizes when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON (an array with one report per suite).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute a neural tangent kernel.
    Ntk(NtkArgs),
    /// Recover the parameter fiber of an end-to-end filter.
    Fiber(FiberArgs),
    /// Integrate the parameter-space gradient flow.
    Flow(FlowArgs),
    /// Checks on fully-connected linear networks.
    Fc(FcArgs),
    /// Check a geometric property at a parameter tuple.
    Verify(VerifyArgs),
}

fn report_outcome(report: &ExperimentReport, out: Option<&PathBuf>) -> Result<Outcome> {
    let outcome = Outcome::from_report(report);
    if let Some(path) = out {
        write_text(path, &format!("{}\n", serde_json::to_string_pretty(&outcome.json).expect("serializable")))?;
    }
    Ok(outcome)
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Reproduce { id, out } => report_outcome(&experiments::reproduce(id, cli.seed)?, out.as_ref()),
        Command::Suite { config, out } => {
            let config = match config {
                Some(path) => {
                    SuiteConfig::parse(&read_text(path)?).map_err(|e| CliError::input(path, e))?
                }
                None => SuiteConfig::default(),
            };
            let mut reports = Vec::with_capacity(config.suites.len());
            for spec in &config.suites {
                log::info!("running suite {:?}", spec.name);
                reports.push(experiments::run_suite(spec, cli.seed)?);
            }
            let passed = reports.iter().all(|r| r.passed);
            let json = serde_json::to_value(&reports).expect("serializable");
            if let Some(path) = out {
                write_text(path, &format!("{}\n", serde_json::to_string_pretty(&json).expect("serializable")))?;
            }
            let mut summary: String = reports.iter().map(ExperimentReport::summary).collect();
            summary.push_str(&format!(
                "{} of {} suites passed\n",
                reports.iter().filter(|r| r.passed).count(),
                reports.len()
            ));
            Ok(Outcome { summary, json, passed })
        }
        Command::Ntk(args) => commands::run_ntk(args),
        Command::Fiber(args) => commands::run_fiber(args, cli.seed),
        Command::Flow(args) => commands::run_flow(args),
        Command::Fc(args) => report_outcome(&commands::run_fc(args, cli.seed)?, args.out.as_ref()),
        Command::Verify(args) => report_outcome(&commands::run_verify(args, cli.seed)?, args.out.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            let text = if cli.json {
                format!("{}\n", serde_json::to_string_pretty(&outcome.json).expect("serializable"))
            } else {
                outcome.summary
            };
            // A reader that closes the pipe early (`| head`) is not an error.
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::from(if outcome.passed { 0 } else { 1 })
        }
        Err(e) => {
            if cli.json {
                eprintln!("{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
