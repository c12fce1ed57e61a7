//! Checkpoint files.
//!
//! ```text
//! "TLITCKPT"            8 bytes
//! version               u32 LE (currently 1)
//! header length         u32 LE
//! header                UTF-8 JSON: family, hyperparameters, architecture,
//!                       vocabularies, training metadata, blob directory
//! blobs                 f64 LE, one per directory entry, in order
//! ```
//!
//! Weight matrices are row-major. Recurrent blobs stack gates along rows in
//! the order i, f, g, o (LSTM) or z, r, n (GRU).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::CellKind;
use crate::dataset::CodepointVocabulary;
use crate::ei::{EiConfig, EiModel};
use crate::model::{DecodeOptions, Family, Model, ModelError, Transliterator};
use crate::rng::Rng;
use crate::seq2seq::{Seq2SeqConfig, Seq2SeqModel};
use crate::tensor::ParamTensors;
use crate::train::Hyperparameters;

pub const MAGIC: &[u8; 8] = b"TLITCKPT";
pub const VERSION: u32 = 1;
const FORMAT: &str = "translit-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last blob")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("blob {name}: {reason}")]
    Blob { name: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Architecture {
    Ei(EiConfig),
    Seq2Seq(Seq2SeqConfig),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    /// Optimizer steps taken by the run.
    pub steps: usize,
    /// Step at which the saved weights were taken.
    pub best_step: usize,
    pub eval_cer: Option<f64>,
    pub eval_wer: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hparams: Hyperparameters,
    pub model: Model,
    pub source_vocab: CodepointVocabulary,
    pub target_vocab: CodepointVocabulary,
    pub normalize_source: bool,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    family: Family,
    hparams: Hyperparameters,
    architecture: Architecture,
    source_vocab: CodepointVocabulary,
    target_vocab: CodepointVocabulary,
    normalize_source: bool,
    metadata: TrainingMetadata,
    blobs: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Architecture {
    pub fn of(model: &Model) -> Self {
        match model {
            Model::Ei(m) => Architecture::Ei(m.config.clone()),
            Model::Seq2Seq(m) => Architecture::Seq2Seq(m.config.clone()),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Architecture::Ei(_) => Family::Ei,
            Architecture::Seq2Seq(_) => Family::Seq2Seq,
        }
    }

    /// Number of weights a model of this shape holds, or `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        fn stack(cell: CellKind, input: u128, h: u128, layers: u128, dirs: u128) -> u128 {
            let gates = match cell {
                CellKind::Lstm => 4,
                CellKind::Gru => 3,
            };
            (0..layers)
                .map(|l| {
                    let inp = if l == 0 { input } else { h * dirs };
                    dirs * gates * h * (inp + h + 1)
                })
                .sum()
        }
        let total = match self {
            Architecture::Ei(c) => {
                let (e, h, v) = (
                    c.embedding as u128,
                    c.hidden as u128,
                    c.target_vocab as u128,
                );
                let dirs = if c.bidirectional { 2 } else { 1 };
                if c.layers > 64 {
                    return None;
                }
                c.source_vocab as u128 * e
                    + stack(c.cell, e, h, c.layers as u128, dirs)
                    + v * (h * dirs + 1)
            }
            Architecture::Seq2Seq(c) => {
                let (e, h, v, a) = (
                    c.embedding as u128,
                    c.hidden as u128,
                    c.target_vocab as u128,
                    c.attention as u128,
                );
                let dirs = if c.bidirectional { 2 } else { 1 };
                let w = h * dirs;
                let l = c.layers as u128;
                if c.layers > 64 {
                    return None;
                }
                c.source_vocab as u128 * e
                    + stack(c.cell, e, h, l, dirs)
                    + v * e
                    + stack(c.cell, e, h, l, 1)
                    + l * (h * w + h)
                    + a * (h + w + 1)
                    + v * (h + w + 1)
            }
        };
        usize::try_from(total).ok()
    }

    /// A model of this shape (weights are placeholders).
    pub fn instantiate(&self) -> Result<Model, ModelError> {
        let mut rng = Rng::new(0);
        Ok(match self {
            Architecture::Ei(c) => Model::Ei(EiModel::init(c.clone(), &mut rng)?),
            Architecture::Seq2Seq(c) => Model::Seq2Seq(Seq2SeqModel::init(c.clone(), &mut rng)?),
        })
    }
}

impl Checkpoint {
    pub fn family(&self) -> Family {
        self.model.family()
    }

    pub fn transliterator(&self, decode: DecodeOptions) -> Transliterator {
        Transliterator {
            model: self.model.clone(),
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            normalize_source: self.normalize_source,
            decode,
        }
    }

    /// The JSON header exactly as it is written to disk.
    pub fn header_json(&self) -> String {
        let header = Header {
            format: FORMAT.to_string(),
            family: self.family(),
            hparams: self.hparams.clone(),
            architecture: Architecture::of(&self.model),
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            normalize_source: self.normalize_source,
            metadata: self.metadata.clone(),
            blobs: self
                .model
                .named_tensors()
                .into_iter()
                .map(|(name, t)| BlobEntry {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        serde_json::to_string(&header).expect("header serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_json();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in self.model.named_tensors() {
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut rest = &bytes[MAGIC.len()..];
        let version = take_u32(&mut rest)?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = take_u32(&mut rest)? as usize;
        if rest.len() < header_len {
            return Err(CheckpointError::Truncated);
        }
        let (header_bytes, mut blobs) = rest.split_at(header_len);
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format != FORMAT {
            return Err(CheckpointError::Header(format!(
                "unknown format {:?}",
                header.format
            )));
        }
        if header.family != header.architecture.family() {
            return Err(CheckpointError::Header(
                "family does not match architecture".into(),
            ));
        }
        match header.architecture.param_count() {
            Some(n) if n.checked_mul(8) == Some(blobs.len()) => {}
            Some(n) if n.checked_mul(8).is_none_or(|b| b > blobs.len()) => {
                return Err(CheckpointError::Truncated)
            }
            Some(n) => return Err(CheckpointError::TrailingBytes(blobs.len() - 8 * n)),
            None => return Err(CheckpointError::Header("architecture too large".into())),
        }
        let mut model = header.architecture.instantiate()?;
        let expected: Vec<BlobEntry> = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| BlobEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        if expected.len() != header.blobs.len() {
            return Err(CheckpointError::Header(format!(
                "{} blobs listed, architecture has {}",
                header.blobs.len(),
                expected.len()
            )));
        }
        for (want, got) in expected.iter().zip(&header.blobs) {
            if want != got {
                return Err(CheckpointError::Blob {
                    name: got.name.clone(),
                    reason: format!(
                        "expected {} {}x{}, directory has {} {}x{}",
                        want.name, want.rows, want.cols, got.name, got.rows, got.cols
                    ),
                });
            }
        }
        for (t, entry) in model.tensors_mut().into_iter().zip(&header.blobs) {
            for v in t.as_mut_slice() {
                if blobs.len() < 8 {
                    return Err(CheckpointError::Truncated);
                }
                let (head, tail) = blobs.split_at(8);
                *v = f64::from_le_bytes(head.try_into().expect("8 bytes"));
                blobs = tail;
                if !v.is_finite() {
                    return Err(CheckpointError::Blob {
                        name: entry.name.clone(),
                        reason: "non-finite value".into(),
                    });
                }
            }
        }
        if !blobs.is_empty() {
            return Err(CheckpointError::TrailingBytes(blobs.len()));
        }
        let (sv, tv) = match &header.architecture {
            Architecture::Ei(c) => (c.source_vocab, c.target_vocab),
            Architecture::Seq2Seq(c) => (c.source_vocab, c.target_vocab),
        };
        if sv != header.source_vocab.len() || tv != header.target_vocab.len() {
            return Err(CheckpointError::Header(
                "vocabulary sizes disagree with the architecture".into(),
            ));
        }
        Ok(Checkpoint {
            hparams: header.hparams,
            model,
            source_vocab: header.source_vocab,
            target_vocab: header.target_vocab,
            normalize_source: header.normalize_source,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn take_u32(rest: &mut &[u8]) -> Result<u32, CheckpointError> {
    if rest.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    let (head, tail) = rest.split_at(4);
    *rest = tail;
    Ok(u32::from_le_bytes(head.try_into().expect("4 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Hyperparameters;

    fn sample(family: Family) -> Checkpoint {
        let source_vocab = CodepointVocabulary::build(["ab"]);
        let target_vocab = CodepointVocabulary::build(["xyz"]);
        let mut hparams = Hyperparameters::defaults(family);
        hparams.hidden = 2;
        hparams.embedding = 2;
        hparams.attention = 2;
        hparams.learning_rate = 0.1;
        let mut rng = Rng::new(3);
        let model = hparams
            .build_model(family, source_vocab.len(), target_vocab.len(), &mut rng)
            .unwrap();
        Checkpoint {
            hparams,
            model,
            source_vocab,
            target_vocab,
            normalize_source: true,
            metadata: TrainingMetadata {
                steps: 10,
                best_step: 5,
                eval_cer: Some(12.5),
                eval_wer: Some(50.0),
                seed: 3,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for family in [Family::Ei, Family::Seq2Seq] {
            let ck = sample(family);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn layout_prefix() {
        let ck = sample(Family::Ei);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"TLITCKPT");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(len, ck.header_json().len());
        assert_eq!(bytes.len(), 16 + len + 8 * ck.model.param_count());
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(header["family"], "ei");
        assert_eq!(header["architecture"]["cell"], "lstm");
        assert_eq!(header["target_vocab"][0], "x");
        assert_eq!(header["blobs"][0]["name"], "embedding");
    }

    #[test]
    fn analytic_parameter_count() {
        for family in [Family::Ei, Family::Seq2Seq] {
            for (cell, layers, bidi) in [
                (CellKind::Lstm, 1, false),
                (CellKind::Gru, 2, true),
                (CellKind::Lstm, 3, true),
            ] {
                let mut ck = sample(family);
                ck.hparams.cell = cell;
                ck.hparams.layers = layers;
                ck.hparams.bidirectional = bidi;
                ck.hparams.hidden = 3;
                let model = ck
                    .hparams
                    .build_model(family, 6, 9, &mut Rng::new(1))
                    .unwrap();
                assert_eq!(
                    Architecture::of(&model).param_count(),
                    Some(model.param_count())
                );
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = sample(Family::Seq2Seq);
        let bytes = ck.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic)
        ));

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Version {
                found: 2,
                expected: 1
            })
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::TrailingBytes(1))
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Blob { .. })
        ));

        assert!(matches!(
            Checkpoint::from_bytes(b"TLIT"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"TLITCKPT\x01"),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn rejects_mismatched_directory() {
        let ck = sample(Family::Ei);
        let header = ck.header_json().replace("\"rows\":6", "\"rows\":7");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let ck = sample(Family::Seq2Seq);
        let dir = std::env::temp_dir().join(format!("tlit-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        std::fs::remove_dir_all(&dir).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Io { .. })
        ));
    }
}
