//! Pipeline front end: dataset synthesis, two-stage pretraining,
//! adapter customization, clip sampling, and benchmark scoring as one
//! deterministic binary. Every run is reproducible from its config
//! and seed; exit codes separate validation (2), I/O (3), and
//! numerical (4) failures.

mod adapt;
mod data;
mod generate;
mod metrics;
mod util;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "spritediff", version, about = "Sprite-world video diffusion pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the procedural pretraining corpus.
    SynthCorpus(data::SynthArgs),
    /// Train the base model: image stage, then temporal stage.
    Pretrain(data::PretrainArgs),
    /// Customize a base checkpoint to held-out subjects with adapters.
    Finetune(adapt::FinetuneArgs),
    /// Sample one clip from a checkpoint.
    Generate(generate::GenerateArgs),
    /// Sample an ordered list of clips sharing one checkpoint.
    Story(generate::StoryArgs),
    /// Score checkpoints on the held-out benchmark.
    Evaluate(metrics::EvaluateArgs),
    /// Merge benchmark reports into one table.
    Report(metrics::ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::SynthCorpus(a) => data::synth_corpus(a),
        Cmd::Pretrain(a) => data::pretrain(a),
        Cmd::Finetune(a) => adapt::finetune_cmd(a),
        Cmd::Generate(a) => generate::generate(a),
        Cmd::Story(a) => generate::story(a),
        Cmd::Evaluate(a) => metrics::evaluate(a),
        Cmd::Report(a) => metrics::report(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
