//! Command-line driver: `train`, `sample`, `evaluate`, `experiment`,
//! `select-genes` and `synth`.

pub mod config;
pub mod error;
pub mod experiment;
pub mod predict;
pub mod prep;
pub mod train;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

use crate::error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "flag", version, about = "Structure-aware spatial gene-expression diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a flag, joint or node_only model.
    Train(train::TrainArgs),
    /// Generate expression for a slide from a checkpoint.
    Sample(predict::SampleArgs),
    /// Score predictions against a ground-truth slide.
    Evaluate(predict::EvaluateArgs),
    /// Gene-dimension experiments.
    #[command(subcommand)]
    Experiment(experiment::Experiment),
    /// Choose a high-mean, high-variance gene panel.
    SelectGenes(prep::SelectGenesArgs),
    /// Write synthetic slides and their spot covariance.
    Synth(prep::SynthArgs),
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Train(a) => train::run(a),
        Command::Sample(a) => predict::sample(a),
        Command::Evaluate(a) => predict::run_evaluate(a),
        Command::Experiment(e) => experiment::run(e),
        Command::SelectGenes(a) => prep::select_genes(a),
        Command::Synth(a) => prep::synth(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error[{}]: {f}", f.tag());
            f.exit_code()
        }
    }
}
