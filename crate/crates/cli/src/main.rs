//! `midstate`: synthetic checkout data, training, evaluation and receipts.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

mod cmd;
mod error;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;
use run::execute;

#[derive(Parser)]
#[command(
    name = "midstate",
    version,
    about = "Retail checkout detection on synthetic scenes"
)]
#[command(after_help = "MSY_THREADS caps the number of worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic checkout dataset with labels and a catalog
    GenData(cmd::data::GenDataArgs),
    /// Assign image ids to train/val/test lists
    Split(cmd::data::SplitArgs),
    /// Train a detector on a generated dataset
    Train(cmd::train::TrainArgs),
    /// Score a model on a split, or a results file against label files
    Eval(cmd::infer::EvalArgs),
    /// Detect products and write annotated images
    Predict(cmd::infer::PredictArgs),
    /// Detect products and price them into receipts
    Checkout(cmd::infer::CheckoutArgs),
    /// Count parameters
    Params(cmd::model::ParamsArgs),
    /// Count forward FLOPs
    Flops(cmd::model::FlopsArgs),
    /// Time forward passes
    Bench(cmd::model::BenchArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout and are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    configure_threads()?;
    match command {
        Command::GenData(a) => execute(a, cmd::data::gen_data),
        Command::Split(a) => execute(a, cmd::data::split),
        Command::Train(a) => execute(a, cmd::train::train),
        Command::Eval(a) => execute(a, cmd::infer::eval),
        Command::Predict(a) => execute(a, cmd::infer::predict),
        Command::Checkout(a) => execute(a, cmd::infer::checkout),
        Command::Params(a) => execute(a, cmd::model::params),
        Command::Flops(a) => execute(a, cmd::model::flops),
        Command::Bench(a) => execute(a, cmd::model::bench),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MSY_THREADS") else {
        return Ok(());
    };
    let n = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("MSY_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}
