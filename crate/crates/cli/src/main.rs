//! Command-line entry points for the toolkit.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use commands::{DecodeArgs, GenDataArgs, GradcheckArgs, ParamcountArgs, ReportArgs, TrainArgs, TwopassArgs};

#[derive(Parser)]
#[command(name = "ltstream", version, about = "Layer-trajectory LSTM streaming ASR toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a run directory.
    GenData(GenDataArgs),
    /// Run a training recipe.
    Train(TrainArgs),
    /// Decode utterances with a checkpoint and score them.
    Decode(DecodeArgs),
    /// Simulate two-pass streaming decoding and write the event timeline.
    SimulateTwopass(TwopassArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Parameter counts at production dimensions.
    Paramcount(ParamcountArgs),
    /// Summarize a finished training run.
    Report(ReportArgs),
}

/// A failure with a machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    kind: &'a str,
    message: String,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<ltstream::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn emit_error(kind: &str, message: String) {
    let record = ErrorRecord { kind, message };
    eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", e.to_string().trim().to_string());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Decode(a) => commands::decode(a),
        Command::SimulateTwopass(a) => commands::simulate_twopass(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Paramcount(a) => commands::paramcount(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error(error_kind(&e), format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
