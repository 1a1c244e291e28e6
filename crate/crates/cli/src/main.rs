mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Replaced-token-detection pretraining, fine-tuning and evaluation.
#[derive(Parser, Debug)]
#[command(name = "rtd", version = output::BUILD_ID)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when no --config is given.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Overrides the config seed everywhere.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must not exist yet.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Rtd,
    Mlm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Qa,
    Sa,
    Ner,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a WordPiece vocabulary on text files.
    TokenizeTrain {
        #[command(flatten)]
        common: Common,
        /// Text files; documents are separated by blank lines.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        min_frequency: Option<u64>,
    },
    /// Write the synthetic language as a text corpus plus its vocabulary.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain with replaced-token detection or plain masked-token prediction.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Text corpus; the synthetic language when omitted.
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        /// Vocabulary file, required with --corpus.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "rtd")]
        objective: ObjectiveArg,
        /// Length of the learning-rate schedule; overrides the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Stop and checkpoint after this step instead of at the end.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Continue from this checkpoint directory, on its own schedule.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pretrained encoder on a downstream task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Pretraining checkpoint; a randomly initialized encoder when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Development split; 10% of --train when omitted.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Fine-tune once per learning rate of the grid and keep the best.
        #[arg(long)]
        lr_sweep: bool,
    },
    /// Score a fine-tuned model on a labeled file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned model directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare the two objectives at equal step budgets with a linear probe.
    BenchEfficiency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TokenizeTrain {
            common,
            corpus,
            vocab_size,
            min_frequency,
        } => commands::tokenize_train(&common, &corpus, vocab_size, min_frequency),
        Command::Synth { common } => commands::synth(&common),
        Command::Pretrain {
            common,
            corpus,
            vocab,
            objective,
            steps,
            stop_at,
            resume,
        } => commands::pretrain(&common, &corpus, vocab.as_deref(), objective, steps, stop_at, resume.as_deref()),
        Command::Finetune {
            common,
            task,
            ckpt,
            vocab,
            train,
            dev,
            test,
            lr_sweep,
        } => commands::finetune(
            &common,
            task,
            ckpt.as_deref(),
            &vocab,
            &train,
            dev.as_deref(),
            test.as_deref(),
            lr_sweep,
        ),
        Command::Evaluate {
            common,
            model,
            vocab,
            data,
        } => commands::evaluate(&common, &model, &vocab, &data),
        Command::BenchEfficiency { common, budget, seeds } => commands::bench(&common, budget, seeds),
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
