use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use translit::checkpoint::CheckpointError;
use translit::dataset::{
    load_pairs, normalize_pairs, split, stats, write_pairs, DatasetError, NormalizeSide,
};
use translit::eval::{error_report, metrics_line, CerMode, ReportOptions};
use translit::model::{DecodeOptions, Transliterate, TransliterateError};
use translit::search::{random_search, write_trial_table, SearchConfig, SearchSpace};
use translit::train::{
    train_with_progress, Hyperparameters, Progress, TrainConfig, TrainData, TrainError,
};
use translit::{Checkpoint, CodepointVocabulary, Family, TransliterationPair};

use crate::{ArchArgs, Command, DataArgs, DecodeArgs, SearchArgs, TrainArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_TRAINING: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Training(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Training(_) => EXIT_TRAINING,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Training(m) => f.write_str(m),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidHyperparameter(_) => CliError::Usage(e.to_string()),
            TrainError::Vocabulary { .. } | TrainError::EmptySplit(_) => {
                CliError::Data(e.to_string())
            }
            other => CliError::Training(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn stdout_error(e: io::Error) -> CliError {
    CliError::Data(format!("writing output: {e}"))
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::DatasetStats {
            corpus,
            normalize_side,
        } => dataset_stats(&corpus, normalize_side),
        Command::Split {
            corpus,
            seed,
            out_dir,
            normalize_side,
        } => split_corpus(&corpus, seed, &out_dir, normalize_side),
        Command::Train(args) => train_cmd(args),
        Command::Search(args) => search_cmd(args),
        Command::Evaluate {
            checkpoint,
            pairs,
            decode,
            top,
            report_tsv,
            macro_cer,
            workers,
            normalize_side,
        } => {
            let opts = ReportOptions {
                top_n: top,
                cer: if macro_cer {
                    CerMode::Macro
                } else {
                    CerMode::Pooled
                },
                workers,
            };
            evaluate(
                &checkpoint,
                &pairs,
                &decode,
                &opts,
                report_tsv.as_deref(),
                normalize_side,
            )
        }
        Command::Transliterate {
            checkpoint,
            input,
            decode,
        } => transliterate(&checkpoint, input.as_deref(), &decode),
    }
}

fn load_normalized(path: &Path, side: NormalizeSide) -> Result<Vec<TransliterationPair>, CliError> {
    let pairs = load_pairs(path)?;
    let (pairs, dropped) = normalize_pairs(pairs, side);
    if dropped > 0 {
        eprintln!("dropped {dropped} pairs left empty by normalization");
    }
    Ok(pairs)
}

fn dataset_stats(corpus: &Path, side: NormalizeSide) -> Result<(), CliError> {
    let pairs = load_normalized(corpus, side)?;
    let s = stats(&pairs)?;
    println!("pairs\tavg_input_len\tavg_output_len\tsource_vocab\ttarget_vocab");
    println!(
        "{}\t{:.2}\t{:.2}\t{}\t{}",
        s.pairs, s.avg_input_len, s.avg_output_len, s.source_vocab, s.target_vocab
    );
    Ok(())
}

fn split_corpus(
    corpus: &Path,
    seed: u64,
    out_dir: &Path,
    side: NormalizeSide,
) -> Result<(), CliError> {
    let pairs = load_normalized(corpus, side)?;
    let parts = split(&pairs, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    for (name, part) in [
        ("train", &parts.train),
        ("eval", &parts.eval),
        ("test", &parts.test),
    ] {
        write_pairs(out_dir.join(format!("{name}.tsv")), part)?;
        println!("{name}\t{}", part.len());
    }
    Ok(())
}

fn decode_options(args: &DecodeArgs) -> Result<DecodeOptions, CliError> {
    if args.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    if args.max_len == Some(0) {
        return Err(CliError::Usage("--max-len must be at least 1".into()));
    }
    Ok(DecodeOptions {
        beam_width: args.beam,
        max_len: args.max_len,
    })
}

fn base_hparams(family: Family, seed: u64, arch: &ArchArgs) -> Hyperparameters {
    let mut hp = Hyperparameters::defaults(family);
    hp.seed = seed;
    if let Some(cell) = arch.cell {
        hp.cell = cell;
    }
    if let Some(layers) = arch.layers {
        hp.layers = layers;
    }
    if arch.bidi {
        hp.bidirectional = true;
    }
    if let Some(e) = arch.embedding {
        hp.embedding = e;
    }
    if let Some(a) = arch.attention {
        hp.attention = a;
    }
    if arch.no_reverse {
        hp.reverse_source = false;
    }
    hp
}

fn train_config(data: &DataArgs) -> Result<TrainConfig, CliError> {
    let time_budget = match data.time_budget_mins {
        Some(m) if m.is_finite() && m > 0.0 => Some(Duration::from_secs_f64(m * 60.0)),
        Some(m) => {
            return Err(CliError::Usage(format!(
                "--time-budget-mins must be positive, got {m}"
            )))
        }
        None => None,
    };
    Ok(TrainConfig {
        max_epochs: data.epochs,
        max_steps: data.max_steps,
        eval_every: data.eval_every,
        decode: decode_options(&data.decode)?,
        time_budget,
    })
}

struct Prepared {
    split: translit::dataset::Split,
    source_vocab: CodepointVocabulary,
    target_vocab: CodepointVocabulary,
}

/// Vocabularies come from the whole corpus, before splitting.
fn prepare(data: &DataArgs) -> Result<Prepared, CliError> {
    let pairs = load_normalized(&data.corpus, data.normalize_side)?;
    let source_vocab = CodepointVocabulary::build(pairs.iter().map(|p| &p.source));
    let target_vocab = CodepointVocabulary::build(pairs.iter().map(|p| &p.target));
    let split = split(&pairs, data.seed)?;
    Ok(Prepared {
        split,
        source_vocab,
        target_vocab,
    })
}

fn open_log(path: Option<&Path>) -> Result<Option<BufWriter<File>>, CliError> {
    path.map(|p| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map(BufWriter::new)
            .map_err(|e| io_error(p, e))
    })
    .transpose()
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let family = args.data.family;
    let mut hp = base_hparams(family, args.data.seed, &args.arch);
    if let Some(h) = args.hidden {
        hp.hidden = h;
    }
    if let Some(e) = args.epsilons {
        hp.epsilons = e;
    }
    if let Some(v) = args.lr {
        hp.learning_rate = v;
    }
    if let Some(v) = args.momentum {
        hp.momentum = v;
    }
    if let Some(v) = args.batch {
        hp.batch_size = v;
    }
    if let Some(v) = args.clip {
        hp.clip_norm = v;
    }
    hp.validate(family)?;
    let config = train_config(&args.data)?;
    let prepared = prepare(&args.data)?;
    let data = TrainData {
        train: &prepared.split.train,
        eval: &prepared.split.eval,
        source_vocab: &prepared.source_vocab,
        target_vocab: &prepared.target_vocab,
        normalize_source: args.data.normalize_side == NormalizeSide::Source,
    };
    let mut log = open_log(args.data.log.as_deref())?;
    let outcome = train_with_progress(family, &hp, &config, &data, &mut |event| match event {
        Progress::Step { step, loss } => {
            if let Some(w) = log.as_mut() {
                let _ = writeln!(w, "step\t{step}\t{loss}");
            }
        }
        Progress::Eval(p) => {
            eprintln!("step {} eval {}", p.step, metrics_line(p.cer, p.wer));
            if let Some(w) = log.as_mut() {
                let _ = writeln!(w, "eval\t{}\t{}\t{}", p.step, p.cer, p.wer);
                let _ = w.flush();
            }
        }
    })?;
    if outcome.skipped > 0 {
        eprintln!("skipped {} infeasible training pairs", outcome.skipped);
    }
    let ck = outcome.checkpoint;
    ck.save(&args.data.checkpoint)?;
    report_test(&ck, &prepared.split.test, &config.decode)
}

fn report_test(
    ck: &Checkpoint,
    test: &[TransliterationPair],
    decode: &DecodeOptions,
) -> Result<(), CliError> {
    let model = ck.transliterator(*decode);
    let report = error_report(&model, test, &ReportOptions::default())
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!("{}", report.metrics_line());
    Ok(())
}

fn search_cmd(args: SearchArgs) -> Result<(), CliError> {
    let family = args.data.family;
    let base = base_hparams(family, args.data.seed, &args.arch);
    if args.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let config = SearchConfig {
        trials: args.trials,
        workers: args.workers.max(1),
        seed: args.data.seed,
        train: train_config(&args.data)?,
    };
    let prepared = prepare(&args.data)?;
    let data = TrainData {
        train: &prepared.split.train,
        eval: &prepared.split.eval,
        source_vocab: &prepared.source_vocab,
        target_vocab: &prepared.target_vocab,
        normalize_source: args.data.normalize_side == NormalizeSide::Source,
    };
    let space = SearchSpace::preset(family);
    let outcome = random_search(family, &space, &base, &config, &data, &prepared.split.test)?;
    if let Some(path) = &args.trial_table {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        write_trial_table(BufWriter::new(file), &outcome.trials).map_err(|e| io_error(path, e))?;
    }
    for t in &outcome.trials {
        if let Some(err) = &t.error {
            eprintln!("trial {} failed: {err}", t.id);
        }
    }
    let (Some(best), Some(id)) = (outcome.best, outcome.best_trial) else {
        return Err(CliError::Training("every trial failed".into()));
    };
    best.save(&args.data.checkpoint)?;
    eprintln!("best trial {id}");
    let t = &outcome.trials[id];
    match (t.test_cer, t.test_wer) {
        (Some(c), Some(w)) => println!("{}", metrics_line(c, w)),
        _ => return Err(CliError::Data("test split is empty".into())),
    }
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    pairs: &Path,
    decode: &DecodeArgs,
    opts: &ReportOptions,
    report_tsv: Option<&Path>,
    side: NormalizeSide,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let decode = decode_options(decode)?;
    let mut pairs = load_pairs(pairs)?;
    if side == NormalizeSide::Target {
        pairs = normalize_pairs(pairs, side).0;
    }
    let model = ck.transliterator(decode);
    let report = error_report(&model, &pairs, opts).map_err(|e| CliError::Data(e.to_string()))?;
    print!("{}", report.to_text());
    if let Some(path) = report_tsv {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        report
            .write_tsv(BufWriter::new(file))
            .map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

fn transliterate(
    checkpoint: &Path,
    input: Option<&Path>,
    decode: &DecodeArgs,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.transliterator(decode_options(decode)?);
    let reader: Box<dyn BufRead> = match input {
        Some(path) => Box::new(BufReader::new(
            File::open(path).map_err(|e| io_error(path, e))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut oov = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("input line {}: {e}", i + 1)))?;
        let token = line.strip_suffix('\r').unwrap_or(&line);
        let result = match model.transliterate(token) {
            Ok(hyp) => hyp,
            Err(TransliterateError::Oov(e)) => {
                oov += 1;
                format!("<ERROR:oov:{}>", e.ch)
            }
            Err(TransliterateError::Empty) => "<ERROR:empty>".to_string(),
            Err(TransliterateError::Model(e)) => format!("<ERROR:model:{e}>"),
        };
        writeln!(out, "{token}\t{result}").map_err(stdout_error)?;
    }
    out.flush().map_err(stdout_error)?;
    if oov > 0 {
        eprintln!("{oov} input lines contained out-of-vocabulary codepoints");
    }
    Ok(())
}
