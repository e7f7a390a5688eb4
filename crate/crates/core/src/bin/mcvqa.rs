use clap::{Parser, Subcommand};
use mcvqa::cli::{
    cmd_ablate, cmd_bias_report, cmd_eval, cmd_finetune, cmd_neighbors, cmd_synth, cmd_train,
    cmd_transfer, RunConfig,
};

#[derive(Parser)]
#[command(name = "mcvqa", about = "Multiple-choice VQA baseline trainer and evaluator")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,

    /// Overrides the seed in the config; one number reproduces a whole run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for evaluation (training updates stay serialized).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train,
    /// Evaluate a checkpoint on a test dataset.
    Eval,
    /// Evaluate a source checkpoint on a target dataset with no training.
    Transfer,
    /// Warm-start training from a checkpoint on a target dataset.
    Finetune,
    /// Run the (head, mask) ablation grid.
    Ablate,
    /// Rank candidate answers by cosine similarity to a query.
    Neighbors,
    /// Generate a synthetic dataset with controllable biases.
    Synth,
    /// Report answer frequencies and the majority-class baseline.
    BiasReport,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();

    let result = (|| {
        let mut cfg = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(cli.seed);
        match cli.command {
            Command::Train => cmd_train(&cfg),
            Command::Eval => cmd_eval(&cfg, cli.threads),
            Command::Transfer => cmd_transfer(&cfg, cli.threads),
            Command::Finetune => cmd_finetune(&cfg, cli.threads),
            Command::Ablate => cmd_ablate(&cfg),
            Command::Neighbors => cmd_neighbors(&cfg),
            Command::Synth => cmd_synth(&cfg),
            Command::BiasReport => cmd_bias_report(&cfg),
        }
    })();

    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
