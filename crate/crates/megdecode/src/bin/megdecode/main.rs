//! Command line for the MEG-to-latent decoding pipeline.
//!
//! Exit codes: 0 on success, 1 for bad invocations or invalid inputs,
//! 2 for runtime failures (I/O, non-finite numerics).

mod dataset;
mod ops;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use megdecode::Result;

#[derive(Parser, Debug)]
#[command(
    name = "megdecode",
    version,
    about = "Decode image latents from MEG epochs",
    subcommand_required = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Epoch, baseline-correct, scale and clamp a continuous recording
    Preprocess(ops::PreprocessArgs),
    /// Assign zero-shot split tags to a presentation manifest
    MakeSplits(ops::MakeSplitsArgs),
    /// Build an image latent bank from a directory of images
    ExtractFeatures(ops::ExtractFeaturesArgs),
    /// Generate a synthetic dataset with a known latent code
    SynthGen(ops::SynthGenArgs),
    /// Train a brain module against a latent bank
    Train(ops::TrainArgs),
    /// Rank model/optimizer configs by validation top-5
    GridSearch(ops::GridSearchArgs),
    /// Train across the contrastive-weight grid and pick the best
    LambdaSweep(ops::LambdaSweepArgs),
    /// Rank predicted latents against a candidate bank
    EvalRetrieval(ops::EvalRetrievalArgs),
    /// Score generated images against ground truth
    EvalGeneration(ops::EvalGenerationArgs),
    /// Decode from sliding or growing time windows
    WindowSweep(ops::WindowSweepArgs),
    /// Linear ridge decoder, the reference baseline
    BaselineRidge(ops::BaselineRidgeArgs),
    /// Per-component parameter counts of a model config
    ModelSummarize(ops::ModelSummarizeArgs),
    /// Describe a pipeline file or directory
    Inspect(ops::InspectArgs),
    /// Convert between tensor files and TSV tables
    Convert(ops::ConvertArgs),
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(args) => ops::run_preprocess(args),
        Command::MakeSplits(args) => ops::make_splits(args),
        Command::ExtractFeatures(args) => ops::extract_features(args),
        Command::SynthGen(args) => ops::synth_gen(args),
        Command::Train(args) => ops::run_train(args),
        Command::GridSearch(args) => ops::grid_search(args),
        Command::LambdaSweep(args) => ops::lambda_sweep(args),
        Command::EvalRetrieval(args) => ops::eval_retrieval(args),
        Command::EvalGeneration(args) => ops::eval_generation(args),
        Command::WindowSweep(args) => ops::window_sweep(args),
        Command::BaselineRidge(args) => ops::baseline_ridge(args),
        Command::ModelSummarize(args) => ops::model_summarize(args),
        Command::Inspect(args) => ops::inspect(args),
        Command::Convert(args) => ops::convert(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help and version are successes; everything else is a usage error
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
