mod bundle;
mod commands;
mod config;
mod manifest;
mod pipeline;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use config::ModelKind;

/// Cross-lingual machine reading comprehension pipelines.
#[derive(Parser)]
#[command(name = "clmrc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the data/model commands; every flag overrides the
/// corresponding JSON config field.
#[derive(Args, Clone, Debug, Default)]
struct CommonArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    dev_file: Option<PathBuf>,
    /// Dictionary TSV: one `source_token<TAB>target_token` pair per line.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Directory holding a trained model (params.bin, vocab files, model.json).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Prediction JSON (qa id -> answer text).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// SimpleMatch relax parameter.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=5))]
    delta: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Synthetic generation: number of examples.
    #[arg(long)]
    num: Option<usize>,
    /// Synthetic generation: cue-corruption rate.
    #[arg(long)]
    ambiguity: Option<f64>,
}

#[derive(Args, Clone, Debug)]
struct BacktranslateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Snap back-translated answers onto exact passage substrings.
    #[arg(long)]
    use_simplematch: bool,
}

#[derive(Args, Clone, Debug)]
struct GradcheckArgs {
    /// Which checks to run.
    #[arg(long, default_value = "all")]
    model: String,
    /// Hidden size for the composed-model checks.
    #[arg(long, default_value_t = 8)]
    h: usize,
    /// Seeds per check.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a reader, aligner, verifier, or the bilingual model.
    Train(CommonArgs),
    /// Write a prediction JSON for a dev file.
    Predict(CommonArgs),
    /// Score a prediction JSON against gold answers (EM / F1).
    Evaluate(CommonArgs),
    /// Batch SimpleMatch: align predictions onto passage substrings.
    Align(CommonArgs),
    /// Zero-shot back-translation pipeline over a target dataset.
    Backtranslate(BacktranslateArgs),
    /// Generate a synthetic bilingual dataset.
    GenSynthetic(CommonArgs),
    /// Dataset statistics for a SQuAD-format file.
    Stats(CommonArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CLMRC_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
        Command::Align(args) => commands::align(&args),
        Command::Backtranslate(args) => commands::backtranslate(&args),
        Command::GenSynthetic(args) => commands::gen_synthetic(&args),
        Command::Stats(args) => commands::stats(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
    };
    if let Err(error) = result {
        eprintln!("error: {error:#}");
        std::process::exit(1);
    }
}
