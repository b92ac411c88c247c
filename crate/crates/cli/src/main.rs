use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shapcast_cli::commands::{
    self, BenchmarkArgs, EvalArgs, ExplainArgs, GlobalExplainArgs, IngestArgs, SynthGenArgs, TrainArgs,
};

/// Explainable load forecasting: synthetic data, training, exact and
/// sampling explanations, aggregation and timing.
#[derive(Parser)]
#[command(name = "shapcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground-truth explanations.
    SynthGen(SynthGenArgs),
    /// Join hourly load, weather and holidays into a dataset directory.
    Ingest(IngestArgs),
    /// Train a forecaster.
    Train(TrainArgs),
    /// Explain one forecast.
    Explain(ExplainArgs),
    /// Explain a split and write importance and dependence tables.
    GlobalExplain(GlobalExplainArgs),
    /// Compare the model with persistence and linear baselines.
    Eval(EvalArgs),
    /// Time the exact and sampling explainers on one example.
    Benchmark(BenchmarkArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthGen(a) => commands::synth_gen(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Explain(a) => commands::explain_cmd(a),
        Command::GlobalExplain(a) => commands::global_explain(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Benchmark(a) => commands::benchmark(a),
    };
    match result {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(shapcast_cli::exit_code(&err))
        }
    }
}
