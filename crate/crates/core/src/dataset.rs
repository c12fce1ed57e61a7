//! Parallel token corpora: loading, English-side normalization, codepoint
//! vocabularies, seeded splits and corpus statistics.
//!
//! Files are UTF-8 with one `source<TAB>target` pair per line.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::rng::Rng;

pub const EPSILON: u32 = 0;
pub const PAD: u32 = 1;
pub const GO: u32 = 2;
pub const EOS: u32 = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: u32 = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid UTF-8")]
    Encoding { line: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: &'static str },
    #[error("need at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("codepoint {ch:?} (U+{:04X}) at position {position} is not in the vocabulary", *ch as u32)]
pub struct OovError {
    pub ch: char,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransliterationPair {
    pub source: String,
    pub target: String,
}

impl TransliterationPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        TransliterationPair {
            source: source.into(),
            target: target.into(),
        }
    }
}

/// Bijective codepoint ↔ id table. Ids `0..4` are reserved for
/// epsilon/blank, pad, go and end-of-sequence; content codepoints follow in
/// first-appearance order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodepointVocabulary {
    symbols: Vec<char>,
    index: HashMap<char, u32>,
}

impl Default for CodepointVocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl CodepointVocabulary {
    pub fn new() -> Self {
        CodepointVocabulary {
            symbols: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn build<I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for s in sequences {
            for ch in s.as_ref().chars() {
                v.insert(ch);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its content symbols in id order.
    pub fn from_symbols(symbols: Vec<char>) -> Result<Self, char> {
        let mut v = Self::new();
        for ch in symbols {
            if v.index.contains_key(&ch) {
                return Err(ch);
            }
            v.insert(ch);
        }
        Ok(v)
    }

    fn insert(&mut self, ch: char) -> u32 {
        if let Some(&id) = self.index.get(&ch) {
            return id;
        }
        let id = RESERVED + self.symbols.len() as u32;
        self.symbols.push(ch);
        self.index.insert(ch, id);
        id
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        RESERVED as usize + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of content codepoints (reserved ids excluded).
    pub fn content_len(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, ch: char) -> Option<u32> {
        self.index.get(&ch).copied()
    }

    /// `None` for reserved or out-of-range ids.
    pub fn symbol(&self, id: u32) -> Option<char> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.symbols.get(i as usize).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, OovError> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| self.id(ch).ok_or(OovError { ch, position }))
            .collect()
    }

    /// Maps ids back to text, skipping reserved ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter_map(|&id| self.symbol(id)).collect()
    }
}

impl Serialize for CodepointVocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let as_strings: Vec<String> = self.symbols.iter().map(|c| c.to_string()).collect();
        as_strings.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CodepointVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw: Vec<String> = Vec::deserialize(d)?;
        let mut symbols = Vec::with_capacity(raw.len());
        for s in raw {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(D::Error::custom(format!(
                        "vocabulary entry {s:?} is not one codepoint"
                    )))
                }
            }
        }
        CodepointVocabulary::from_symbols(symbols)
            .map_err(|c| D::Error::custom(format!("duplicate vocabulary entry {c:?}")))
    }
}

/// Parses a pair file held in memory. Line numbers in errors are 1-based.
pub fn parse_pairs(bytes: &[u8]) -> Result<Vec<TransliterationPair>, DatasetError> {
    let mut pairs = Vec::new();
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    if body.is_empty() {
        return Ok(pairs);
    }
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let text = std::str::from_utf8(raw).map_err(|_| DatasetError::Encoding { line })?;
        let mut fields = text.split('\t');
        let (source, target) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(t), None) => (s, t),
            (_, None, _) => {
                return Err(DatasetError::Parse {
                    line,
                    reason: "missing tab separator",
                })
            }
            _ => {
                return Err(DatasetError::Parse {
                    line,
                    reason: "more than one tab",
                })
            }
        };
        if source.is_empty() || target.is_empty() {
            return Err(DatasetError::Parse {
                line,
                reason: "empty field",
            });
        }
        pairs.push(TransliterationPair::new(source, target));
    }
    Ok(pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<TransliterationPair>, DatasetError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_pairs(&bytes)
}

pub fn write_pairs(
    path: impl AsRef<Path>,
    pairs: &[TransliterationPair],
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.source);
        out.push('\t');
        out.push_str(&p.target);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Lowercases and strips diacritics: canonical decomposition with combining
/// marks removed. Letters without a decomposition (ß, ø, ł, ...) pass
/// through unchanged.
pub fn normalize_english(token: &str) -> String {
    let lowered: String = token.nfd().flat_map(char::to_lowercase).collect();
    lowered
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .nfc()
        .collect()
}

/// Which side of a pair holds English text to normalize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeSide {
    #[default]
    None,
    Source,
    Target,
}

impl FromStr for NormalizeSide {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(NormalizeSide::None),
            "source" => Ok(NormalizeSide::Source),
            "target" => Ok(NormalizeSide::Target),
            other => Err(format!(
                "unknown side {other:?} (expected none, source or target)"
            )),
        }
    }
}

impl fmt::Display for NormalizeSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizeSide::None => "none",
            NormalizeSide::Source => "source",
            NormalizeSide::Target => "target",
        })
    }
}

/// Normalizes the requested side of every pair. Pairs whose normalized
/// side becomes empty are dropped; the count of dropped pairs is returned.
pub fn normalize_pairs(
    pairs: Vec<TransliterationPair>,
    side: NormalizeSide,
) -> (Vec<TransliterationPair>, usize) {
    if side == NormalizeSide::None {
        return (pairs, 0);
    }
    let before = pairs.len();
    let kept: Vec<TransliterationPair> = pairs
        .into_iter()
        .map(|mut p| {
            match side {
                NormalizeSide::Source => p.source = normalize_english(&p.source),
                NormalizeSide::Target => p.target = normalize_english(&p.target),
                NormalizeSide::None => {}
            }
            p
        })
        .filter(|p| !p.source.is_empty() && !p.target.is_empty())
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<TransliterationPair>,
    pub eval: Vec<TransliterationPair>,
    pub test: Vec<TransliterationPair>,
}

/// Seeded shuffle, then test = ⌊n/10⌋, eval = ⌊(n − test)/10⌋, train = rest.
pub fn split(pairs: &[TransliterationPair], seed: u64) -> Result<Split, DatasetError> {
    if pairs.len() < 10 {
        return Err(DatasetError::TooFewPairs {
            needed: 10,
            got: pairs.len(),
        });
    }
    let mut shuffled = pairs.to_vec();
    Rng::new(seed).shuffle(&mut shuffled);
    let n = shuffled.len();
    let test_len = n / 10;
    let eval_len = (n - test_len) / 10;
    let train = shuffled.split_off(test_len + eval_len);
    let eval = shuffled.split_off(test_len);
    Ok(Split {
        train,
        eval,
        test: shuffled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub avg_input_len: f64,
    pub avg_output_len: f64,
    pub source_vocab: usize,
    pub target_vocab: usize,
}

pub fn stats(pairs: &[TransliterationPair]) -> Result<DatasetStats, DatasetError> {
    if pairs.is_empty() {
        return Err(DatasetError::TooFewPairs { needed: 1, got: 0 });
    }
    let n = pairs.len() as f64;
    let src_total: usize = pairs.iter().map(|p| p.source.chars().count()).sum();
    let tgt_total: usize = pairs.iter().map(|p| p.target.chars().count()).sum();
    Ok(DatasetStats {
        pairs: pairs.len(),
        avg_input_len: src_total as f64 / n,
        avg_output_len: tgt_total as f64 / n,
        source_vocab: CodepointVocabulary::build(pairs.iter().map(|p| &p.source)).content_len(),
        target_vocab: CodepointVocabulary::build(pairs.iter().map(|p| &p.target)).content_len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_kyoto_line() {
        let pairs = parse_pairs("kyoto\tきょうと\n".as_bytes()).unwrap();
        assert_eq!(pairs, vec![TransliterationPair::new("kyoto", "きょうと")]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_pairs(b"a\tb\nabc\n") {
            Err(DatasetError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_pairs(b"a\tb\tc"),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_pairs(b"a\t\n"),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_pairs(b"\tb"),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_pairs(b"a\tb\nx\t\xff\xfe\n"),
            Err(DatasetError::Encoding { line: 2 })
        ));
        // blank line in the middle is malformed
        assert!(matches!(
            parse_pairs(b"a\tb\n\nc\td\n"),
            Err(DatasetError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn parse_tolerates_crlf_and_missing_final_newline() {
        let pairs = parse_pairs(b"a\tb\r\nc\td").unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].target, "b");
        assert!(parse_pairs(b"").unwrap().is_empty());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_english("è"), "e");
        assert_eq!(normalize_english("ü"), "u");
        assert_eq!(normalize_english("ABC"), "abc");
        assert_eq!(normalize_english("ß"), "ß");
        assert_eq!(normalize_english("Øyvind Łukasz"), "øyvind łukasz");
        assert_eq!(normalize_english("Pérez-Müller"), "perez-muller");
    }

    #[test]
    fn vocab_basics() {
        let v = CodepointVocabulary::build(["ab", "bc"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.content_len(), 3);
        assert_eq!(v.id('a'), Some(4));
        assert_eq!(v.id('c'), Some(6));
        for id in RESERVED..v.len() as u32 {
            assert_eq!(v.id(v.symbol(id).unwrap()), Some(id));
        }
        assert_eq!(v.symbol(EOS), None);
        assert_eq!(v.encode("cab").unwrap(), vec![6, 4, 5]);
        assert_eq!(
            v.encode("abz"),
            Err(OovError {
                ch: 'z',
                position: 2
            })
        );
        assert_eq!(v.decode(&[GO, 5, 6, EOS]), "bc");
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = CodepointVocabulary::build(["héllo", "ワールド"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: CodepointVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<CodepointVocabulary>(r#"["a","a"]"#).is_err());
        assert!(serde_json::from_str::<CodepointVocabulary>(r#"["ab"]"#).is_err());
    }

    fn numbered(n: usize) -> Vec<TransliterationPair> {
        (0..n)
            .map(|i| TransliterationPair::new(format!("s{i}"), format!("t{i}")))
            .collect()
    }

    #[test]
    fn split_sizes() {
        let s = split(&numbered(100), 1).unwrap();
        assert_eq!((s.test.len(), s.eval.len(), s.train.len()), (10, 9, 81));
        assert!(matches!(
            split(&numbered(9), 1),
            Err(DatasetError::TooFewPairs { .. })
        ));
    }

    #[test]
    fn split_partitions_and_reproduces() {
        let pairs = numbered(1000);
        let a = split(&pairs, 3).unwrap();
        let b = split(&pairs, 3).unwrap();
        let c = split(&pairs, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut all: Vec<_> = a
            .train
            .iter()
            .chain(&a.eval)
            .chain(&a.test)
            .cloned()
            .collect();
        all.sort_by(|x, y| x.source.cmp(&y.source));
        let mut orig = pairs.clone();
        orig.sort_by(|x, y| x.source.cmp(&y.source));
        assert_eq!(all, orig);
    }

    #[test]
    fn stats_single_pair() {
        let s = stats(&[TransliterationPair::new("ab", "xyz")]).unwrap();
        assert_eq!(s.avg_input_len, 2.0);
        assert_eq!(s.avg_output_len, 3.0);
        assert_eq!((s.source_vocab, s.target_vocab), (2, 3));
        assert!(stats(&[]).is_err());
    }

    #[test]
    fn normalize_pairs_drops_emptied() {
        let pairs = vec![
            TransliterationPair::new("Émile", "x"),
            TransliterationPair::new("\u{301}", "y"),
        ];
        let (kept, dropped) = normalize_pairs(pairs, NormalizeSide::Source);
        assert_eq!(kept, vec![TransliterationPair::new("emile", "x")]);
        assert_eq!(dropped, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2000))]
            #[test]
            fn normalization_idempotent(s in "\\PC{0,12}") {
                let once = normalize_english(&s);
                prop_assert_eq!(normalize_english(&once), once);
            }

            #[test]
            fn split_partitions(n in 10usize..300, seed in any::<u64>()) {
                let pairs = numbered(n);
                let s = split(&pairs, seed).unwrap();
                prop_assert_eq!(s.train.len() + s.eval.len() + s.test.len(), n);
                prop_assert_eq!(s.test.len(), n / 10);
                prop_assert_eq!(s.eval.len(), (n - n / 10) / 10);
            }
        }
    }
}
