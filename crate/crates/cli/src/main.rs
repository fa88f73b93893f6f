//! `facectl`: data generation, staged training, evaluation, ablations and
//! figure sheets.
//!
//! Exit codes: 0 success, 1 other failure, 2 config or usage error, 3 data
//! error, 4 checkpoint mismatch, 5 output directory locked.

mod commands;
mod run;
mod sheet;

use clap::{Parser, Subcommand};

use commands::{AblateArgs, Common, EvalArgs, GridArgs, InterpArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "facectl", version, about = "Disentangled facial motion control on a synthetic face world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Writes the train and test splits under --out.
    GenData(Common),
    /// Runs one training stage.
    Train(TrainArgs),
    /// Scores a checkpoint under the evaluation protocols.
    Eval(EvalArgs),
    /// Retrains stage 3 per ablation variant and tabulates the scores.
    Ablate(AblateArgs),
    /// Renders a control-grid sheet.
    Grid(GridArgs),
    /// Renders an expression interpolation strip.
    Interp(InterpArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData(c) => commands::gen_data(c),
        Cmd::Train(a) => commands::train(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Ablate(a) => commands::ablate(a),
        Cmd::Grid(a) => commands::grid(a),
        Cmd::Interp(a) => commands::interp(a),
    };
    if let Err(e) = res {
        eprintln!("error: {e:#}");
        std::process::exit(run::exit_code(&e));
    }
}
