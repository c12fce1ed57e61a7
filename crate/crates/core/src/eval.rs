//! Edit distance, character and word error rates, and error reports.

use std::fmt::Write as _;
use std::io;

use thiserror::Error;

use crate::dataset::TransliterationPair;
use crate::model::Transliterate;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("references are empty")]
    EmptyReferences,
}

/// Levenshtein distance over codepoints with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    edit_distance_seq(&a, &b)
}

pub fn edit_distance_seq<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn check_lengths<A, B>(refs: &[A], hyps: &[B]) -> Result<(), EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    Ok(())
}

/// Corpus-pooled CER: total edits over total reference length, in percent.
pub fn cer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, EvalError> {
    check_lengths(refs, hyps)?;
    let mut edits = 0;
    let mut chars = 0;
    for (r, h) in refs.iter().zip(hyps) {
        edits += edit_distance(r.as_ref(), h.as_ref());
        chars += r.as_ref().chars().count();
    }
    if chars == 0 {
        return Err(EvalError::EmptyReferences);
    }
    Ok(100.0 * edits as f64 / chars as f64)
}

/// Per-token CER averaged over tokens, in percent. Empty references are
/// skipped.
pub fn macro_cer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, EvalError> {
    check_lengths(refs, hyps)?;
    let mut total = 0.0;
    let mut n = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let len = r.as_ref().chars().count();
        if len > 0 {
            total += edit_distance(r.as_ref(), h.as_ref()) as f64 / len as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyReferences);
    }
    Ok(100.0 * total / n as f64)
}

/// Share of tokens not reproduced exactly, in percent.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64, EvalError> {
    check_lengths(refs, hyps)?;
    if refs.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let wrong = refs
        .iter()
        .zip(hyps)
        .filter(|(r, h)| r.as_ref() != h.as_ref())
        .count();
    Ok(100.0 * wrong as f64 / refs.len() as f64)
}

/// The fixed one-line summary printed by the command-line tools.
pub fn metrics_line(cer: f64, wer: f64) -> String {
    format!("CER {cer:.2} WER {wer:.2}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CerMode {
    #[default]
    Pooled,
    Macro,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorExample {
    pub input: String,
    pub reference: String,
    pub hypothesis: String,
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub pairs: usize,
    /// Pairs whose source could not be decoded (scored as empty output).
    pub failures: usize,
    pub errors: Vec<ErrorExample>,
    pub hypotheses: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportOptions {
    pub top_n: usize,
    pub cer: CerMode,
    pub workers: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            top_n: 20,
            cer: CerMode::Pooled,
            workers: 1,
        }
    }
}

/// Decodes every source and scores the outputs. Failed decodes count as
/// empty hypotheses. `errors` holds the `top_n` mismatches with the largest
/// edit distance, earlier pairs first among equals.
pub fn error_report<T: Transliterate + Sync + ?Sized>(
    model: &T,
    pairs: &[TransliterationPair],
    opts: &ReportOptions,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let decoded = decode_all(model, pairs, opts.workers.max(1));
    let failures = decoded.iter().filter(|d| d.is_none()).count();
    let hypotheses: Vec<String> = decoded.into_iter().map(Option::unwrap_or_default).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.target.as_str()).collect();
    let cer_value = match opts.cer {
        CerMode::Pooled => cer(&refs, &hypotheses)?,
        CerMode::Macro => macro_cer(&refs, &hypotheses)?,
    };
    let wer_value = wer(&refs, &hypotheses)?;
    let mut errors: Vec<ErrorExample> = pairs
        .iter()
        .zip(&hypotheses)
        .filter(|(p, h)| p.target != **h)
        .map(|(p, h)| ErrorExample {
            input: p.source.clone(),
            reference: p.target.clone(),
            hypothesis: h.clone(),
            distance: edit_distance(&p.target, h),
        })
        .collect();
    errors.sort_by_key(|e| std::cmp::Reverse(e.distance));
    errors.truncate(opts.top_n);
    Ok(EvalReport {
        cer: cer_value,
        wer: wer_value,
        pairs: pairs.len(),
        failures,
        errors,
        hypotheses,
    })
}

fn decode_all<T: Transliterate + Sync + ?Sized>(
    model: &T,
    pairs: &[TransliterationPair],
    workers: usize,
) -> Vec<Option<String>> {
    if workers == 1 || pairs.len() < 2 {
        return pairs
            .iter()
            .map(|p| model.transliterate(&p.source).ok())
            .collect();
    }
    let chunk = pairs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|p| model.transliterate(&p.source).ok())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decode worker panicked"))
            .collect()
    })
}

impl EvalReport {
    pub fn metrics_line(&self) -> String {
        metrics_line(self.cer, self.wer)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pairs {}", self.pairs);
        if self.failures > 0 {
            let _ = writeln!(out, "undecodable {}", self.failures);
        }
        let _ = writeln!(out, "{}", self.metrics_line());
        if !self.errors.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "input\treference\thypothesis\tdistance");
            for e in &self.errors {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    e.input, e.reference, e.hypothesis, e.distance
                );
            }
        }
        out
    }

    pub fn write_tsv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "input\treference\thypothesis\tdistance")?;
        for e in &self.errors {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                e.input, e.reference, e.hypothesis, e.distance
            )?;
        }
        Ok(())
    }
}
