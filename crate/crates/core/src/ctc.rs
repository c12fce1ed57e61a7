//! Epsilon insertion, CTC forward-backward, and CTC decoding.
//!
//! Label id 0 is the blank. The same id is used for the epsilons inserted
//! into the source string, so a frame table has one column per target
//! vocabulary id with column 0 holding the blank.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{log_add, Tensor, LOG_ZERO};

/// Blank / epsilon label.
pub const BLANK: u32 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target needs at least {required} frames but only {frames} are available")]
    Infeasible { frames: usize, required: usize },
    #[error("frame table has no frames")]
    NoFrames,
    #[error("target position {0} holds the blank label")]
    BlankInTarget(usize),
    #[error("label {label} outside the {classes} frame classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("target has zero probability under the frame table")]
    ZeroLikelihood,
    #[error("beam width must be at least 1")]
    ZeroWidth,
}

/// Puts `k` epsilons before every symbol and `k` after the last one:
/// `k·(n+1) + n` symbols in total.
pub fn insert_epsilons<T: Copy>(source: &[T], k: usize, epsilon: T) -> Vec<T> {
    let mut out = Vec::with_capacity(k * (source.len() + 1) + source.len());
    for &s in source {
        out.extend(std::iter::repeat_n(epsilon, k));
        out.push(s);
    }
    out.extend(std::iter::repeat_n(epsilon, k));
    out
}

/// Standard CTC collapse: merge runs of identical labels, then drop blanks.
pub fn collapse<T: Copy + PartialEq>(path: &[T], blank: T) -> Vec<T> {
    let mut out = Vec::new();
    let mut prev: Option<T> = None;
    for &label in path {
        if prev != Some(label) && label != blank {
            out.push(label);
        }
        prev = Some(label);
    }
    out
}

/// Minimum number of frames a CTC path needs to emit `target`: one per label
/// plus a separating blank between equal neighbours.
pub fn required_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward/backward tables over the blank-interleaved target.
///
/// `alpha[t][s]` is the log-probability of all path prefixes ending in
/// extended position `s` at frame `t`, emission at `t` included.
/// `beta[t][s]` covers frames `t+1..T` given position `s` at `t` (emission at
/// `t` excluded), so `Σ_s alpha[t][s]·beta[t][s]` equals the total likelihood
/// for every `t`.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    pub extended: Vec<u32>,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub log_likelihood: f64,
}

impl CtcLattice {
    pub fn frames(&self) -> usize {
        self.alpha.rows()
    }

    /// `log Σ_s alpha[t][s]·beta[t][s]`
    pub fn log_mass_at(&self, t: usize) -> f64 {
        self.alpha
            .row(t)
            .iter()
            .zip(self.beta.row(t))
            .fold(LOG_ZERO, |acc, (a, b)| log_add(acc, a + b))
    }
}

fn validate(frame_logprobs: &Tensor, target: &[u32]) -> Result<(), CtcError> {
    let frames = frame_logprobs.rows();
    if frames == 0 {
        return Err(CtcError::NoFrames);
    }
    let classes = frame_logprobs.cols();
    for (i, &label) in target.iter().enumerate() {
        if label == BLANK {
            return Err(CtcError::BlankInTarget(i));
        }
        if label as usize >= classes {
            return Err(CtcError::LabelOutOfRange { label, classes });
        }
    }
    let required = required_frames(target);
    if frames < required {
        return Err(CtcError::Infeasible { frames, required });
    }
    Ok(())
}

pub fn ctc_lattice(frame_logprobs: &Tensor, target: &[u32]) -> Result<CtcLattice, CtcError> {
    validate(frame_logprobs, target)?;
    let frames = frame_logprobs.rows();
    let mut extended = Vec::with_capacity(2 * target.len() + 1);
    extended.push(BLANK);
    for &label in target {
        extended.push(label);
        extended.push(BLANK);
    }
    let states = extended.len();
    let skip_allowed = |s: usize| s >= 2 && extended[s] != BLANK && extended[s] != extended[s - 2];
    let emit = |t: usize, s: usize| frame_logprobs.get(t, extended[s] as usize);

    let mut alpha = Tensor::zeros(frames, states);
    alpha.fill(LOG_ZERO);
    alpha.set(0, 0, emit(0, 0));
    if states > 1 {
        alpha.set(0, 1, emit(0, 1));
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.get(t - 1, s - 1));
            }
            if skip_allowed(s) {
                acc = log_add(acc, alpha.get(t - 1, s - 2));
            }
            if acc != LOG_ZERO {
                alpha.set(t, s, acc + emit(t, s));
            }
        }
    }

    let mut beta = Tensor::zeros(frames, states);
    beta.fill(LOG_ZERO);
    beta.set(frames - 1, states - 1, 0.0);
    if states > 1 {
        beta.set(frames - 1, states - 2, 0.0);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = LOG_ZERO;
            for next in s..(s + 3).min(states) {
                if next == s + 2 && !skip_allowed(next) {
                    continue;
                }
                let b = beta.get(t + 1, next);
                if b != LOG_ZERO {
                    acc = log_add(acc, b + emit(t + 1, next));
                }
            }
            beta.set(t, s, acc);
        }
    }

    let mut log_likelihood = alpha.get(frames - 1, states - 1);
    if states > 1 {
        log_likelihood = log_add(log_likelihood, alpha.get(frames - 1, states - 2));
    }
    if !log_likelihood.is_finite() {
        return Err(CtcError::ZeroLikelihood);
    }
    Ok(CtcLattice {
        extended,
        alpha,
        beta,
        log_likelihood,
    })
}

/// Negative log-likelihood of `target` and its gradient with respect to every
/// entry of `frame_logprobs` (a `T × classes` table of log-probabilities).
pub fn ctc_loss(frame_logprobs: &Tensor, target: &[u32]) -> Result<(f64, Tensor), CtcError> {
    let lattice = ctc_lattice(frame_logprobs, target)?;
    let mut grad = Tensor::zeros(frame_logprobs.rows(), frame_logprobs.cols());
    let ll = lattice.log_likelihood;
    for t in 0..lattice.frames() {
        for (s, &label) in lattice.extended.iter().enumerate() {
            let a = lattice.alpha.get(t, s);
            let b = lattice.beta.get(t, s);
            if a == LOG_ZERO || b == LOG_ZERO {
                continue;
            }
            let occupancy = (a + b - ll).exp();
            let g = grad.get(t, label as usize) - occupancy;
            grad.set(t, label as usize, g);
        }
    }
    Ok((-ll, grad))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame-wise argmax labels (lowest id wins ties).
pub fn best_path(frame_logprobs: &Tensor) -> Vec<u32> {
    (0..frame_logprobs.rows())
        .map(|t| argmax(frame_logprobs.row(t)) as u32)
        .collect()
}

/// Labels emitted by the greedy decoder together with the frame that emitted
/// them. Frames are strictly increasing.
pub fn greedy_alignment(frame_logprobs: &Tensor) -> Vec<(usize, u32)> {
    let path = best_path(frame_logprobs);
    let mut out = Vec::new();
    let mut prev = None;
    for (t, &label) in path.iter().enumerate() {
        if prev != Some(label) && label != BLANK {
            out.push((t, label));
        }
        prev = Some(label);
    }
    out
}

pub fn ctc_greedy_decode(frame_logprobs: &Tensor) -> Vec<u32> {
    collapse(&best_path(frame_logprobs), BLANK)
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const ZERO: PrefixScore = PrefixScore {
        blank: LOG_ZERO,
        non_blank: LOG_ZERO,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Prefix beam search over collapsed strings. Each surviving prefix carries
/// the summed probability of every path that collapses to it, split by
/// whether the path ends in a blank. Beams are ranked by total probability,
/// ties broken by lexicographically smaller prefix.
pub fn ctc_beam_decode(frame_logprobs: &Tensor, width: usize) -> Result<Vec<u32>, CtcError> {
    if width == 0 {
        return Err(CtcError::ZeroWidth);
    }
    let classes = frame_logprobs.cols();
    let mut beams: Vec<(Vec<u32>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: LOG_ZERO,
        },
    )];
    for t in 0..frame_logprobs.rows() {
        let row = frame_logprobs.row(t);
        let mut next: BTreeMap<Vec<u32>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beams {
            let total = score.total();
            let last = prefix.last().copied();

            let entry = next.entry(prefix.clone()).or_insert(PrefixScore::ZERO);
            entry.blank = log_add(entry.blank, total + row[BLANK as usize]);
            if let Some(l) = last {
                entry.non_blank = log_add(entry.non_blank, score.non_blank + row[l as usize]);
            }

            for c in 1..classes as u32 {
                let p = row[c as usize];
                if p == LOG_ZERO {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                // a repeated label only extends after a blank
                let source = if last == Some(c) { score.blank } else { total };
                let entry = next.entry(extended).or_insert(PrefixScore::ZERO);
                entry.non_blank = log_add(entry.non_blank, source + p);
            }
        }
        let mut ranked: Vec<(Vec<u32>, PrefixScore)> = next.into_iter().collect();
        // BTreeMap order is lexicographic, and the sort is stable
        ranked.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
        ranked.truncate(width);
        beams = ranked;
    }
    Ok(beams.into_iter().next().map(|(p, _)| p).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::log_softmax;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn kyoto_epsilons() {
        let out: String = insert_epsilons(&chars("きょうと"), 2, '_')
            .into_iter()
            .collect();
        assert_eq!(out, "__き__ょ__う__と__");
    }

    #[test]
    fn epsilon_patterns() {
        let empty: String = insert_epsilons(&[], 3, '_').into_iter().collect();
        assert_eq!(empty, "___");
        let ab: String = insert_epsilons(&chars("ab"), 1, '_').into_iter().collect();
        assert_eq!(ab, "_a_b_");
        assert_eq!(insert_epsilons(&chars("abc"), 0, '_'), chars("abc"));
    }

    #[test]
    fn kyoto_collapse() {
        let out: String = collapse(&chars("__ky_o_____to_"), '_')
            .into_iter()
            .collect();
        assert_eq!(out, "kyoto");
        let aa: String = collapse(&chars("aa_a"), '_').into_iter().collect();
        assert_eq!(aa, "aa");
        assert!(collapse(&chars("____"), '_').is_empty());
    }

    fn table(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn two_frames_single_label() {
        // paths aε, εa, aa collapse to "a": 3 of 4 equally likely paths
        let half = 0.5f64.ln();
        let t = table(&[vec![half, half], vec![half, half]]);
        let (nll, _) = ctc_loss(&t, &[1]).unwrap();
        assert!((nll - -(0.75f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn infeasible_target() {
        let t = table(&[vec![-1.0, -1.0, -1.0]]);
        assert_eq!(
            ctc_loss(&t, &[1, 2]).unwrap_err(),
            CtcError::Infeasible {
                frames: 1,
                required: 2
            }
        );
        // repeats need a separating blank
        let t = table(&[vec![-1.0, -1.0], vec![-1.0, -1.0]]);
        assert!(matches!(
            ctc_loss(&t, &[1, 1]),
            Err(CtcError::Infeasible { required: 3, .. })
        ));
    }

    #[test]
    fn bad_targets() {
        let t = table(&vec![vec![-1.0, -1.0]; 3]);
        assert_eq!(ctc_loss(&t, &[0]).unwrap_err(), CtcError::BlankInTarget(0));
        assert!(matches!(
            ctc_loss(&t, &[5]),
            Err(CtcError::LabelOutOfRange { label: 5, .. })
        ));
        assert_eq!(
            ctc_loss(&Tensor::zeros(0, 2), &[]).unwrap_err(),
            CtcError::NoFrames
        );
    }

    fn random_table(frames: usize, classes: usize, rng: &mut Rng) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|_| {
                let logits: Vec<f64> = (0..classes).map(|_| rng.uniform(-2.0, 2.0)).collect();
                log_softmax(&logits).unwrap()
            })
            .collect();
        table(&rows)
    }

    fn brute_force_nll(t: &Tensor, target: &[u32]) -> f64 {
        let (frames, classes) = t.shape();
        let mut total = 0.0;
        let mut path = vec![0u32; frames];
        for code in 0..classes.pow(frames as u32) {
            let mut c = code;
            let mut logp = 0.0;
            for (f, slot) in path.iter_mut().enumerate() {
                *slot = (c % classes) as u32;
                c /= classes;
                logp += t.get(f, *slot as usize);
            }
            if collapse(&path, BLANK) == target {
                total += logp.exp();
            }
        }
        -total.ln()
    }

    #[test]
    fn loss_matches_enumeration() {
        let mut rng = Rng::new(77);
        let mut checked = 0;
        while checked < 100 {
            let frames = 1 + rng.below(6) as usize;
            let classes = 2 + rng.below(3) as usize;
            let len = rng.below(4) as usize;
            let target: Vec<u32> = (0..len)
                .map(|_| 1 + rng.below(classes as u64 - 1) as u32)
                .collect();
            let t = random_table(frames, classes, &mut rng);
            match ctc_loss(&t, &target) {
                Ok((nll, _)) => {
                    let oracle = brute_force_nll(&t, &target);
                    assert!(
                        (nll - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
                        "{nll} vs {oracle}"
                    );
                    checked += 1;
                }
                Err(CtcError::Infeasible { .. }) => {
                    assert!(brute_force_nll(&t, &target).is_infinite());
                }
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let t = random_table(5, 3, &mut rng);
            let target = [1, 2];
            let (_, grad) = ctc_loss(&t, &target).unwrap();
            let err = crate::tensor::grad_check(
                |v| {
                    let probe = Tensor::from_vec(5, 3, v.to_vec()).unwrap();
                    ctc_loss(&probe, &target).unwrap().0
                },
                t.as_slice(),
                grad.as_slice(),
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn forward_backward_mass_constant() {
        let mut rng = Rng::new(13);
        let t = random_table(8, 4, &mut rng);
        let lattice = ctc_lattice(&t, &[1, 3, 3]).unwrap();
        for f in 0..8 {
            assert!((lattice.log_mass_at(f) - lattice.log_likelihood).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_target_is_all_blank() {
        let mut rng = Rng::new(2);
        let t = random_table(4, 3, &mut rng);
        let (nll, _) = ctc_loss(&t, &[]).unwrap();
        let expected: f64 = -(0..4).map(|f| t.get(f, 0)).sum::<f64>();
        assert!((nll - expected).abs() < 1e-12);
    }

    fn one_hot_table(path: &[u32], classes: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&l| {
                (0..classes)
                    .map(|c| if c as u32 == l { 0.0 } else { -30.0 })
                    .collect()
            })
            .collect();
        table(&rows)
    }

    #[test]
    fn greedy_on_kyoto_path() {
        // '_' = 0, k = 1, y = 2, o = 3, t = 4
        let map = |c: char| match c {
            '_' => 0,
            'k' => 1,
            'y' => 2,
            'o' => 3,
            't' => 4,
            _ => unreachable!(),
        };
        let path: Vec<u32> = "__ky_o_____to_".chars().map(map).collect();
        let t = one_hot_table(&path, 5);
        assert_eq!(ctc_greedy_decode(&t), vec![1, 2, 3, 4, 3]);
        assert_eq!(ctc_beam_decode(&t, 1).unwrap(), vec![1, 2, 3, 4, 3]);
    }

    #[test]
    fn greedy_edge_cases() {
        assert!(ctc_greedy_decode(&one_hot_table(&[0, 0, 0], 3)).is_empty());
        let tie = table(&vec![vec![0.5f64.ln(), 0.5f64.ln()]; 4]);
        assert!(ctc_greedy_decode(&tie).is_empty());
        assert!(ctc_beam_decode(&one_hot_table(&[0, 0], 3), 4)
            .unwrap()
            .is_empty());
        assert_eq!(ctc_beam_decode(&tie, 0), Err(CtcError::ZeroWidth));
    }

    #[test]
    fn alignment_is_monotonic() {
        let mut rng = Rng::new(44);
        for _ in 0..50 {
            let t = random_table(12, 4, &mut rng);
            let al = greedy_alignment(&t);
            assert!(al.windows(2).all(|w| w[0].0 < w[1].0));
            let labels: Vec<u32> = al.iter().map(|&(_, l)| l).collect();
            assert_eq!(labels, ctc_greedy_decode(&t));
        }
    }

    #[test]
    fn wide_beam_is_exact() {
        let mut rng = Rng::new(91);
        for _ in 0..100 {
            let frames = 1 + rng.below(4) as usize;
            let classes = 2 + rng.below(2) as usize;
            let t = random_table(frames, classes, &mut rng);
            // oracle: accumulate probability of every collapsed string
            let mut mass: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            let mut path = vec![0u32; frames];
            for code in 0..classes.pow(frames as u32) {
                let mut c = code;
                let mut logp = 0.0;
                for (f, slot) in path.iter_mut().enumerate() {
                    *slot = (c % classes) as u32;
                    c /= classes;
                    logp += t.get(f, *slot as usize);
                }
                *mass.entry(collapse(&path, BLANK)).or_insert(0.0) += logp.exp();
            }
            let best = mass
                .iter()
                .fold(None::<(&Vec<u32>, f64)>, |acc, (k, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((k, v)),
                })
                .unwrap()
                .0
                .clone();
            assert_eq!(ctc_beam_decode(&t, 10_000).unwrap(), best);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn epsilon_round_trip(s in "[a-z]{0,12}", k in 1usize..4) {
                let src = chars(&s);
                prop_assert_eq!(collapse(&insert_epsilons(&src, k, '_'), '_'), src.clone());
                prop_assert_eq!(insert_epsilons(&src, k, '_').len(), k * (src.len() + 1) + src.len());
            }
        }
    }
}
