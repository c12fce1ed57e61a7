//! `translit`: corpus statistics, splitting, training, hyperparameter search,
//! evaluation and batch transliteration.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use translit::dataset::NormalizeSide;
use translit::{CellKind, Family};

#[derive(Parser, Debug)]
#[command(
    name = "translit",
    version,
    about = "Codepoint-level neural transliteration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print pair count, average lengths and vocabulary sizes of a corpus.
    DatasetStats {
        corpus: PathBuf,
        #[arg(long, default_value_t = NormalizeSide::None)]
        normalize_side: NormalizeSide,
    },
    /// Write train/eval/test splits of a corpus.
    Split {
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = NormalizeSide::None)]
        normalize_side: NormalizeSide,
    },
    /// Train one configuration and report test metrics.
    Train(TrainArgs),
    /// Random hyperparameter search.
    Search(SearchArgs),
    /// Score a checkpoint on a pair file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        pairs: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Worst pairs to list.
        #[arg(long, default_value_t = 20)]
        top: usize,
        #[arg(long)]
        report_tsv: Option<PathBuf>,
        /// Average CER per token instead of pooling edits over the corpus.
        #[arg(long)]
        macro_cer: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Normalization applied to the references before scoring.
        #[arg(long, default_value_t = NormalizeSide::None)]
        normalize_side: NormalizeSide,
    },
    /// Transliterate one token per line from a file or standard input.
    Transliterate {
        #[arg(long)]
        checkpoint: PathBuf,
        input: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct DecodeArgs {
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Output length cap for seq2seq models (default 2·source + 5).
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    corpus: PathBuf,
    #[arg(long)]
    family: Family,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the selected checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = NormalizeSide::None)]
    normalize_side: NormalizeSide,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 200_000)]
    max_steps: usize,
    #[arg(long, default_value_t = 1000)]
    eval_every: usize,
    /// Stop each training run after this many minutes.
    #[arg(long)]
    time_budget_mins: Option<f64>,
    /// Append per-step losses and evaluations to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    #[arg(long)]
    cell: Option<CellKind>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    bidi: bool,
    #[arg(long)]
    embedding: Option<usize>,
    #[arg(long)]
    attention: Option<usize>,
    /// Feed the seq2seq encoder the source front to back.
    #[arg(long)]
    no_reverse: bool,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epsilons: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    clip: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// TSV with one row per trial.
    #[arg(long)]
    trial_table: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
