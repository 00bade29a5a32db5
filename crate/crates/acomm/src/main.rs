//! `acomm` — experiment harness for inter-model activation communication.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::*;

#[derive(Parser)]
#[command(
    name = "acomm",
    version,
    about = "Run activation-communication experiments: generate coordination games, \
             initialize models, train activation maps, execute communication protocols, \
             sweep graft layers, and evaluate analytical compute costs.",
    after_help = "Seeds resolve as: --seed flag, then the config file, then the \
                  ACOMM_SEED environment variable, then 0."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a coordination-game dataset (JSON lines)
    GenTasks(GenTasksArgs),
    /// Initialize a seeded random model and write an ACWT weight file
    InitModel(InitModelArgs),
    /// Run a communication protocol over a task file
    Run(RunArgs),
    /// Sweep graft layers (k, j) and emit an accuracy matrix
    Sweep(SweepArgs),
    /// Train the linear activation map W for a model pair
    TrainMap(TrainMapArgs),
    /// Evaluate the analytical FLOP cost model
    Cost(CostArgs),
    /// Bootstrap-aggregate a results file into an accuracy report
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::GenTasks(args) => cmd_gen_tasks(args),
        Cmd::InitModel(args) => cmd_init_model(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::TrainMap(args) => cmd_train_map(args),
        Cmd::Cost(args) => cmd_cost(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
