//! Neural transliteration over Unicode codepoints.
//!
//! Two model families share one set of recurrent building blocks:
//!
//! * epsilon-insertion models ([`ei`]): the source is padded with blank
//!   symbols, a (bidirectional, stacked) recurrent network labels every frame,
//!   and training aligns frames to the target with CTC ([`ctc`]);
//! * attentional encoder-decoder models ([`seq2seq`]).
//!
//! Around them sit corpus handling ([`dataset`]), momentum SGD training,
//! checkpoints and random hyperparameter search ([`train`], [`checkpoint`],
//! [`search`]) and CER/WER evaluation ([`eval`]).

pub mod cells;
pub mod checkpoint;
pub mod ctc;
pub mod dataset;
pub mod ei;
pub mod eval;
pub mod model;
pub mod optim;
pub mod rng;
pub mod search;
pub mod seq2seq;
pub mod tensor;
pub mod train;

pub use cells::{CellKind, LayerStack};
pub use checkpoint::Checkpoint;
pub use dataset::{CodepointVocabulary, TransliterationPair};
pub use model::{Family, Model, Transliterator};
pub use rng::Rng;
pub use tensor::{ParamTensors, Tensor};
