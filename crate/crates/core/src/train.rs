//! Training loop: per-example gradients averaged over a mini-batch, global
//! norm clipping, momentum SGD, periodic evaluation with best-model
//! selection.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::CellKind;
use crate::checkpoint::{Checkpoint, TrainingMetadata};
use crate::ctc::required_frames;
use crate::dataset::{CodepointVocabulary, OovError, TransliterationPair};
use crate::ei::{EiConfig, EiModel};
use crate::eval::{cer, wer};
use crate::model::{DecodeOptions, Family, Model, ModelError};
use crate::optim::{clip_gradients, Sgd};
use crate::rng::Rng;
use crate::seq2seq::{Seq2SeqConfig, Seq2SeqModel};
use crate::tensor::{accumulate, zeros_like, ParamTensors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Units per direction.
    pub hidden: usize,
    pub layers: usize,
    pub cell: CellKind,
    pub bidirectional: bool,
    /// Epsilon-insertion models only.
    pub epsilons: usize,
    pub seed: u64,
    pub embedding: usize,
    /// Seq2seq only.
    pub attention: usize,
    /// Seq2seq only.
    pub reverse_source: bool,
}

impl Hyperparameters {
    pub fn defaults(family: Family) -> Self {
        match family {
            Family::Ei => Hyperparameters {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 1,
                clip_norm: 9.0,
                hidden: 100,
                layers: 1,
                cell: CellKind::Lstm,
                bidirectional: true,
                epsilons: 3,
                seed: 0,
                embedding: 32,
                attention: 0,
                reverse_source: false,
            },
            Family::Seq2Seq => Hyperparameters {
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 8,
                clip_norm: 5.0,
                hidden: 128,
                layers: 1,
                cell: CellKind::Gru,
                bidirectional: false,
                epsilons: 0,
                seed: 0,
                embedding: 32,
                attention: 64,
                reverse_source: true,
            },
        }
    }

    pub fn validate(&self, family: Family) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidHyperparameter(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if self.hidden == 0 || self.layers == 0 || self.embedding == 0 {
            return bad("hidden units, layers and embedding size must be positive".into());
        }
        if family == Family::Seq2Seq && self.attention == 0 {
            return bad("attention size must be positive".into());
        }
        Ok(())
    }

    pub fn build_model(
        &self,
        family: Family,
        source_vocab: usize,
        target_vocab: usize,
        rng: &mut Rng,
    ) -> Result<Model, ModelError> {
        Ok(match family {
            Family::Ei => Model::Ei(EiModel::init(
                EiConfig {
                    cell: self.cell,
                    layers: self.layers,
                    hidden: self.hidden,
                    embedding: self.embedding,
                    bidirectional: self.bidirectional,
                    epsilons: self.epsilons,
                    source_vocab,
                    target_vocab,
                    forget_bias: 0.0,
                },
                rng,
            )?),
            Family::Seq2Seq => Model::Seq2Seq(Seq2SeqModel::init(
                Seq2SeqConfig {
                    cell: self.cell,
                    layers: self.layers,
                    hidden: self.hidden,
                    embedding: self.embedding,
                    attention: self.attention,
                    bidirectional: self.bidirectional,
                    reverse_source: self.reverse_source,
                    source_vocab,
                    target_vocab,
                    forget_bias: 0.0,
                },
                rng,
            )?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub max_steps: usize,
    /// Evaluate every this many steps, and at every epoch end.
    pub eval_every: usize,
    pub decode: DecodeOptions,
    /// Stop early once this much wall time has passed. Results then depend
    /// on machine speed.
    pub time_budget: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            max_steps: 200_000,
            eval_every: 1000,
            decode: DecodeOptions::default(),
            time_budget: None,
        }
    }
}

/// Training inputs; the vocabularies must cover both splits.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [TransliterationPair],
    pub eval: &'a [TransliterationPair],
    pub source_vocab: &'a CodepointVocabulary,
    pub target_vocab: &'a CodepointVocabulary,
    /// Recorded in the checkpoint; inference applies it to raw inputs.
    pub normalize_source: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("{split} pair {index}: {source}")]
    Vocabulary {
        split: &'static str,
        index: usize,
        source: OovError,
    },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("no trainable pairs ({skipped} skipped as infeasible)")]
    NothingToTrain { skipped: usize },
    #[error("loss became {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Progress {
    Step { step: usize, loss: f64 },
    Eval(EvalPoint),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean mini-batch loss per step.
    pub losses: Vec<f64>,
    pub evaluations: Vec<EvalPoint>,
    /// Training pairs that cannot be aligned (epsilon models only).
    pub skipped: usize,
}

struct Encoded {
    source: Vec<u32>,
    target: Vec<u32>,
}

fn encode_split(
    pairs: &[TransliterationPair],
    split: &'static str,
    data: &TrainData<'_>,
) -> Result<Vec<Encoded>, TrainError> {
    pairs
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let wrap = |source| TrainError::Vocabulary {
                split,
                index,
                source,
            };
            Ok(Encoded {
                source: data.source_vocab.encode(&p.source).map_err(wrap)?,
                target: data.target_vocab.encode(&p.target).map_err(wrap)?,
            })
        })
        .collect()
}

fn feasible(model: &Model, pair: &Encoded) -> bool {
    match model {
        Model::Ei(m) => {
            !pair.source.is_empty()
                && m.config.frames_for(pair.source.len()) >= required_frames(&pair.target)
        }
        Model::Seq2Seq(_) => !pair.source.is_empty(),
    }
}

/// Decodes every evaluation source and scores the results.
pub fn evaluate_model(
    model: &Model,
    sources: &[Vec<u32>],
    references: &[&str],
    target_vocab: &CodepointVocabulary,
    decode: &DecodeOptions,
) -> (f64, f64) {
    let hyps: Vec<String> = sources
        .iter()
        .map(|s| {
            model
                .decode(s, decode)
                .map(|ids| target_vocab.decode(&ids))
                .unwrap_or_default()
        })
        .collect();
    let c = cer(references, &hyps).unwrap_or(0.0);
    let w = wer(references, &hyps).unwrap_or(0.0);
    (c, w)
}

pub fn train(
    family: Family,
    hparams: &Hyperparameters,
    config: &TrainConfig,
    data: &TrainData<'_>,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(family, hparams, config, data, &mut |_| {})
}

pub fn train_with_progress(
    family: Family,
    hparams: &Hyperparameters,
    config: &TrainConfig,
    data: &TrainData<'_>,
    progress: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome, TrainError> {
    hparams.validate(family)?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.eval.is_empty() {
        return Err(TrainError::EmptySplit("eval"));
    }
    let started = Instant::now();
    let mut init_rng = Rng::with_stream(hparams.seed, 0);
    let mut order_rng = Rng::with_stream(hparams.seed, 1);
    let mut model = hparams.build_model(
        family,
        data.source_vocab.len(),
        data.target_vocab.len(),
        &mut init_rng,
    )?;

    let encoded = encode_split(data.train, "train", data)?;
    let (usable, rejected): (Vec<Encoded>, Vec<Encoded>) =
        encoded.into_iter().partition(|p| feasible(&model, p));
    let skipped = rejected.len();
    if usable.is_empty() {
        return Err(TrainError::NothingToTrain { skipped });
    }
    let eval_sources: Vec<Vec<u32>> = encode_split(data.eval, "eval", data)?
        .into_iter()
        .map(|e| e.source)
        .collect();
    let eval_refs: Vec<&str> = data.eval.iter().map(|p| p.target.as_str()).collect();

    let opt = Sgd {
        learning_rate: hparams.learning_rate,
        momentum: hparams.momentum,
    };
    let mut velocity = zeros_like(&model);
    let mut losses = Vec::new();
    let mut evaluations = Vec::new();
    let mut best: Option<(EvalPoint, Model)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let out_of_time =
        |started: &Instant| config.time_budget.is_some_and(|b| started.elapsed() >= b);

    let evaluate = |model: &Model,
                    step: usize,
                    best: &mut Option<(EvalPoint, Model)>,
                    progress: &mut dyn FnMut(&Progress)| {
        let (c, w) = evaluate_model(
            model,
            &eval_sources,
            &eval_refs,
            data.target_vocab,
            &config.decode,
        );
        let point = EvalPoint {
            step,
            cer: c,
            wer: w,
        };
        progress(&Progress::Eval(point));
        let better = match best {
            None => true,
            Some((b, _)) => (w, c) < (b.wer, b.cer),
        };
        if better {
            *best = Some((point, model.clone()));
        }
        point
    };

    'epochs: for _ in 0..config.max_epochs {
        order_rng.shuffle(&mut order);
        for batch in order.chunks(hparams.batch_size) {
            if step >= config.max_steps || out_of_time(&started) {
                break 'epochs;
            }
            let mut grads = zeros_like(&model);
            let mut total = 0.0;
            for &i in batch {
                let (loss, g) = model.loss_and_grad(&usable[i].source, &usable[i].target)?;
                total += loss;
                accumulate(&mut grads, &g).expect("gradient shapes match the model");
            }
            let n = batch.len() as f64;
            let loss = total / n;
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, loss });
            }
            for t in grads.tensors_mut() {
                t.scale(1.0 / n);
            }
            clip_gradients(&mut grads, hparams.clip_norm);
            opt.step(&mut model, &mut velocity, &grads)
                .expect("gradient shapes match the model");
            losses.push(loss);
            progress(&Progress::Step { step, loss });
            if config.eval_every > 0 && step % config.eval_every == 0 {
                evaluations.push(evaluate(&model, step, &mut best, progress));
            }
        }
        if evaluations.last().map(|e| e.step) != Some(step) {
            evaluations.push(evaluate(&model, step, &mut best, progress));
        }
    }
    if evaluations.last().map(|e| e.step) != Some(step) {
        evaluations.push(evaluate(&model, step, &mut best, progress));
    }
    let (point, best_model) = best.expect("at least one evaluation ran");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            hparams: hparams.clone(),
            model: best_model,
            source_vocab: data.source_vocab.clone(),
            target_vocab: data.target_vocab.clone(),
            normalize_source: data.normalize_source,
            metadata: TrainingMetadata {
                steps: step,
                best_step: point.step,
                eval_cer: Some(point.cer),
                eval_wer: Some(point.wer),
                seed: hparams.seed,
            },
        },
        losses,
        evaluations,
        skipped,
    })
}
