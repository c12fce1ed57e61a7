//! The two model families behind one enum, and text-level inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::CellError;
use crate::ctc::CtcError;
use crate::dataset::{normalize_english, CodepointVocabulary, OovError};
use crate::ei::EiModel;
use crate::seq2seq::Seq2SeqModel;
use crate::tensor::{ParamTensors, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty source sequence")]
    EmptySource,
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("target must end with the end-of-sequence id")]
    MissingEos,
    #[error("id {id} outside vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("shape: {0}")]
    Shape(CellError),
    #[error("invalid decode limits: {0}")]
    Limits(&'static str),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

impl From<CellError> for ModelError {
    fn from(e: CellError) -> Self {
        match e {
            CellError::IdOutOfRange { id, size } => ModelError::IdOutOfRange { id, size },
            other => ModelError::Shape(other),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Epsilon insertion with CTC alignment.
    Ei,
    Seq2Seq,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Ei => "ei",
            Family::Seq2Seq => "seq2seq",
        })
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ei" => Ok(Family::Ei),
            "seq2seq" => Ok(Family::Seq2Seq),
            other => Err(format!("unknown family {other:?} (expected ei or seq2seq)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// 1 means greedy decoding.
    pub beam_width: usize,
    /// Seq2seq output cap; `None` means `2·source_len + 5`.
    pub max_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_width: 1,
            max_len: None,
        }
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ei(EiModel),
    Seq2Seq(Seq2SeqModel),
}

impl Model {
    pub fn family(&self) -> Family {
        match self {
            Model::Ei(_) => Family::Ei,
            Model::Seq2Seq(_) => Family::Seq2Seq,
        }
    }

    /// Training loss for one pair and its gradient. `target` holds content
    /// ids only; the seq2seq family appends the end-of-sequence id itself.
    pub fn loss_and_grad(
        &self,
        source: &[u32],
        target: &[u32],
    ) -> Result<(f64, Model), ModelError> {
        match self {
            Model::Ei(m) => {
                let (loss, g) = m.loss(source, target)?;
                Ok((loss, Model::Ei(g)))
            }
            Model::Seq2Seq(m) => {
                let mut with_eos = target.to_vec();
                with_eos.push(crate::dataset::EOS);
                let (loss, g) = m.teacher_forced_loss(source, &with_eos)?;
                Ok((loss, Model::Seq2Seq(g)))
            }
        }
    }

    pub fn decode(&self, source: &[u32], opts: &DecodeOptions) -> Result<Vec<u32>, ModelError> {
        match self {
            Model::Ei(m) => {
                if opts.beam_width <= 1 {
                    m.greedy_decode(source)
                } else {
                    m.beam_decode(source, opts.beam_width)
                }
            }
            Model::Seq2Seq(m) => {
                let limits = crate::seq2seq::DecodeLimits::for_source(source.len(), opts)?;
                if opts.beam_width <= 1 {
                    m.greedy_decode(source, &limits)
                } else {
                    m.beam_decode(source, &limits)
                }
            }
        }
    }
}

impl ParamTensors for Model {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Ei(m) => m.named_tensors(),
            Model::Seq2Seq(m) => m.named_tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Ei(m) => m.tensors_mut(),
            Model::Seq2Seq(m) => m.tensors_mut(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransliterateError {
    #[error(transparent)]
    Oov(#[from] OovError),
    #[error("empty input token")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that maps a source token to a hypothesis.
pub trait Transliterate {
    fn transliterate(&self, source: &str) -> Result<String, TransliterateError>;
}

impl<F> Transliterate for F
where
    F: Fn(&str) -> Result<String, TransliterateError>,
{
    fn transliterate(&self, source: &str) -> Result<String, TransliterateError> {
        self(source)
    }
}

/// A model bound to its vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Transliterator {
    pub model: Model,
    pub source_vocab: CodepointVocabulary,
    pub target_vocab: CodepointVocabulary,
    /// Apply English normalization to inputs before encoding.
    pub normalize_source: bool,
    pub decode: DecodeOptions,
}

impl Transliterator {
    pub fn prepare(&self, source: &str) -> String {
        if self.normalize_source {
            normalize_english(source)
        } else {
            source.to_string()
        }
    }
}

impl Transliterate for Transliterator {
    fn transliterate(&self, source: &str) -> Result<String, TransliterateError> {
        let text = self.prepare(source);
        if text.is_empty() {
            return Err(TransliterateError::Empty);
        }
        let ids = self.source_vocab.encode(&text)?;
        let out = self.model.decode(&ids, &self.decode)?;
        Ok(self.target_vocab.decode(&out))
    }
}
