//! `sonovis`: generate data, train the manifold and the audio transformation
//! network, predict and score.
//!
//! Exit codes: 0 ok, 1 other failure, 2 invalid config, 3 missing input,
//! 4 incompatible artifacts, 5 training diverged. Failures print one JSON
//! line to stderr.

mod args;
mod commands;
mod error;
mod fsutil;
mod runlog;
mod spectro;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sonovis", version, about = "Audio-to-vision via learned visual manifolds")]
struct Cli {
    /// Run data-parallel kernels on one thread
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn WAV files into cached spectrogram tensors
    Preprocess(commands::PreprocessArgs),
    /// Generate a synthetic paired audio/depth/segmentation dataset
    GenSynth(commands::GenSynthArgs),
    /// Train the visual manifold (VQ-VAE or VAE)
    TrainVqvae(commands::TrainVqArgs),
    /// Train the audio transformation network against a frozen manifold
    TrainAtnet(commands::TrainAtArgs),
    /// Train the single-stage audio-to-pixels baseline
    TrainE2e(commands::TrainE2eArgs),
    /// Predict visuals for a manifest split
    Infer(commands::InferArgs),
    /// Score predictions against ground truth
    Evaluate(commands::EvaluateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        sonovis_diff::par::set_parallel(false);
    }
    let result = match &cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::TrainVqvae(a) => commands::train_vqvae(a),
        Command::TrainAtnet(a) => commands::train_atnet(a),
        Command::TrainE2e(a) => commands::train_e2e(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
