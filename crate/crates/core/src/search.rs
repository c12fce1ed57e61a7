//! Random hyperparameter search: sample, train, keep the best on the
//! evaluation split, score only the winner on the test split.

use std::io;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::checkpoint::Checkpoint;
use crate::dataset::TransliterationPair;
use crate::eval::{cer, wer};
use crate::model::{Family, Transliterate};
use crate::rng::Rng;
use crate::train::{train, Hyperparameters, TrainConfig, TrainData, TrainError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FloatRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl FloatRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        FloatRange { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        FloatRange { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn uniform(&self, rng: &mut Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.uniform(self.lo, self.hi).clamp(self.lo, self.hi)
        }
    }

    fn log_uniform(&self, rng: &mut Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.uniform(self.lo.ln(), self.hi.ln())
                .exp()
                .clamp(self.lo, self.hi)
        }
    }
}

impl IntRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        IntRange { lo, hi }
    }

    pub fn fixed(v: usize) -> Self {
        IntRange { lo: v, hi: v }
    }

    pub fn contains(&self, v: usize) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        rng.int_inclusive(self.lo as u64, self.hi as u64) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub learning_rate: FloatRange,
    pub momentum: FloatRange,
    pub batch_size: IntRange,
    pub clip_norm: FloatRange,
    pub hidden: IntRange,
    pub epsilons: IntRange,
}

impl SearchSpace {
    pub fn preset(family: Family) -> Self {
        match family {
            Family::Ei => SearchSpace {
                learning_rate: FloatRange::new(1e-5, 0.1),
                momentum: FloatRange::new(0.5, 0.99),
                batch_size: IntRange::fixed(1),
                clip_norm: FloatRange::fixed(9.0),
                hidden: IntRange::new(100, 1000),
                epsilons: IntRange::fixed(3),
            },
            Family::Seq2Seq => SearchSpace {
                learning_rate: FloatRange::new(1e-5, 10.0),
                momentum: FloatRange::new(0.5, 0.99),
                batch_size: IntRange::new(1, 50),
                clip_norm: FloatRange::new(1.0, 10.0),
                hidden: IntRange::new(50, 1000),
                epsilons: IntRange::fixed(0),
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let floats = [
            ("learning rate", self.learning_rate),
            ("momentum", self.momentum),
            ("clip norm", self.clip_norm),
        ];
        for (name, r) in floats {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(format!("{name} range [{}, {}] is invalid", r.lo, r.hi));
            }
        }
        if self.learning_rate.lo <= 0.0 {
            return Err("learning rate range must be positive".into());
        }
        let ints = [
            ("batch size", self.batch_size),
            ("hidden units", self.hidden),
            ("epsilons", self.epsilons),
        ];
        for (name, r) in ints {
            if r.lo > r.hi {
                return Err(format!("{name} range [{}, {}] is invalid", r.lo, r.hi));
            }
        }
        Ok(())
    }

    /// Draws one configuration; fields the space does not cover come from
    /// `base`.
    pub fn sample(&self, base: &Hyperparameters, rng: &mut Rng) -> Hyperparameters {
        Hyperparameters {
            learning_rate: self.learning_rate.log_uniform(rng),
            momentum: self.momentum.uniform(rng),
            batch_size: self.batch_size.sample(rng),
            clip_norm: self.clip_norm.uniform(rng),
            hidden: self.hidden.sample(rng),
            epsilons: self.epsilons.sample(rng),
            seed: rng.next_u64(),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub id: usize,
    pub hparams: Hyperparameters,
    pub eval_cer: Option<f64>,
    pub eval_wer: Option<f64>,
    pub test_cer: Option<f64>,
    pub test_wer: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: Option<Checkpoint>,
    pub best_trial: Option<usize>,
    pub trials: Vec<TrialRecord>,
}

#[derive(Clone, Debug)]
pub struct SearchConfig {
    pub trials: usize,
    pub workers: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

/// Runs `config.trials` independent trainings on up to `config.workers`
/// threads. Trial `i` always gets the same sampled values regardless of the
/// worker count. Failed trials are recorded, not fatal.
pub fn random_search(
    family: Family,
    space: &SearchSpace,
    base: &Hyperparameters,
    config: &SearchConfig,
    data: &TrainData<'_>,
    test: &[TransliterationPair],
) -> Result<SearchOutcome, TrainError> {
    space
        .validate()
        .map_err(TrainError::InvalidHyperparameter)?;
    if config.trials == 0 {
        return Err(TrainError::InvalidHyperparameter(
            "at least one trial is required".into(),
        ));
    }
    let mut sampler = Rng::with_stream(config.seed, 0x5ea7c4);
    let plans: Vec<Hyperparameters> = (0..config.trials)
        .map(|_| space.sample(base, &mut sampler))
        .collect();

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..config.workers.clamp(1, config.trials) {
            let tx = tx.clone();
            let next = &next;
            let plans = &plans;
            scope.spawn(move || loop {
                let id = next.fetch_add(1, Ordering::Relaxed);
                if id >= plans.len() {
                    break;
                }
                let result = train(family, &plans[id], &config.train, data);
                if tx.send((id, result)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut results: Vec<_> = rx.into_iter().collect();
    results.sort_by_key(|(id, _)| *id);

    let mut trials = Vec::with_capacity(results.len());
    let mut best: Option<(usize, f64, f64, Checkpoint)> = None;
    for (id, result) in results {
        let mut record = TrialRecord {
            id,
            hparams: plans[id].clone(),
            eval_cer: None,
            eval_wer: None,
            test_cer: None,
            test_wer: None,
            error: None,
        };
        match result {
            Ok(outcome) => {
                let meta = &outcome.checkpoint.metadata;
                let (c, w) = (
                    meta.eval_cer.unwrap_or(f64::INFINITY),
                    meta.eval_wer.unwrap_or(f64::INFINITY),
                );
                record.eval_cer = meta.eval_cer;
                record.eval_wer = meta.eval_wer;
                let better = match &best {
                    None => true,
                    Some((_, bc, bw, _)) => (w, c) < (*bw, *bc),
                };
                if better {
                    best = Some((id, c, w, outcome.checkpoint));
                }
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        trials.push(record);
    }

    let best_trial = best.as_ref().map(|b| b.0);
    if let Some((id, _, _, ck)) = &best {
        if !test.is_empty() {
            let model = ck.transliterator(config.train.decode);
            let hyps: Vec<String> = test
                .iter()
                .map(|p| model.transliterate(&p.source).unwrap_or_default())
                .collect();
            let refs: Vec<&str> = test.iter().map(|p| p.target.as_str()).collect();
            trials[*id].test_cer = cer(&refs, &hyps).ok();
            trials[*id].test_wer = wer(&refs, &hyps).ok();
        }
    }
    Ok(SearchOutcome {
        best: best.map(|b| b.3),
        best_trial,
        trials,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// One row per trial: id, sampled values, eval metrics, test metrics
/// (winner only), and the failure message if any.
pub fn write_trial_table<W: io::Write>(mut w: W, trials: &[TrialRecord]) -> io::Result<()> {
    writeln!(
        w,
        "trial\tlearning_rate\tmomentum\tbatch_size\tclip_norm\thidden\tlayers\tcell\tbidirectional\tepsilons\tseed\teval_cer\teval_wer\ttest_cer\ttest_wer\terror"
    )?;
    for t in trials {
        let h = &t.hparams;
        writeln!(
            w,
            "{}\t{:e}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.id,
            h.learning_rate,
            h.momentum,
            h.batch_size,
            h.clip_norm,
            h.hidden,
            h.layers,
            h.cell,
            h.bidirectional,
            h.epsilons,
            h.seed,
            opt(t.eval_cer),
            opt(t.eval_wer),
            opt(t.test_cer),
            opt(t.test_wer),
            t.error.as_deref().unwrap_or("").replace(['\t', '\n'], " "),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CodepointVocabulary;

    #[test]
    fn draws_stay_in_range() {
        for family in [Family::Ei, Family::Seq2Seq] {
            let space = SearchSpace::preset(family);
            let base = Hyperparameters::defaults(family);
            let mut rng = Rng::new(5);
            let mut lo_decade = false;
            let mut hi_decade = false;
            for _ in 0..1000 {
                let h = space.sample(&base, &mut rng);
                assert!(space.learning_rate.contains(h.learning_rate));
                assert!(space.momentum.contains(h.momentum));
                assert!(space.batch_size.contains(h.batch_size));
                assert!(space.clip_norm.contains(h.clip_norm));
                assert!(space.hidden.contains(h.hidden));
                assert!(space.epsilons.contains(h.epsilons));
                lo_decade |= h.learning_rate < 1e-4;
                hi_decade |= h.learning_rate > 1e-2;
            }
            // log-uniform sampling reaches both ends of the range
            assert!(lo_decade && hi_decade);
        }
        let ei = SearchSpace::preset(Family::Ei);
        let h = ei.sample(&Hyperparameters::defaults(Family::Ei), &mut Rng::new(1));
        assert_eq!((h.batch_size, h.clip_norm, h.epsilons), (1, 9.0, 3));
    }

    #[test]
    fn invalid_spaces() {
        let mut s = SearchSpace::preset(Family::Seq2Seq);
        s.hidden = IntRange::new(10, 5);
        assert!(s.validate().is_err());
        let mut s = SearchSpace::preset(Family::Seq2Seq);
        s.learning_rate = FloatRange::new(0.0, 1.0);
        assert!(s.validate().is_err());
    }

    fn corpus() -> Vec<TransliterationPair> {
        [
            ("ab", "xy"),
            ("ba", "yx"),
            ("aab", "xxy"),
            ("b", "y"),
            ("a", "x"),
        ]
        .iter()
        .map(|(s, t)| TransliterationPair::new(*s, *t))
        .collect()
    }

    #[test]
    fn search_selects_minimum_and_is_worker_independent() {
        let pairs = corpus();
        let sv = CodepointVocabulary::build(pairs.iter().map(|p| &p.source));
        let tv = CodepointVocabulary::build(pairs.iter().map(|p| &p.target));
        let data = TrainData {
            train: &pairs,
            eval: &pairs,
            source_vocab: &sv,
            target_vocab: &tv,
            normalize_source: false,
        };
        let mut space = SearchSpace::preset(Family::Seq2Seq);
        space.hidden = IntRange::new(4, 8);
        space.batch_size = IntRange::new(1, 3);
        space.learning_rate = FloatRange::new(0.01, 0.5);
        let mut base = Hyperparameters::defaults(Family::Seq2Seq);
        base.embedding = 4;
        base.attention = 4;
        let mut config = SearchConfig {
            trials: 4,
            workers: 1,
            seed: 9,
            train: TrainConfig {
                max_steps: 40,
                eval_every: 20,
                ..TrainConfig::default()
            },
        };
        let one = random_search(Family::Seq2Seq, &space, &base, &config, &data, &pairs).unwrap();
        config.workers = 3;
        let three = random_search(Family::Seq2Seq, &space, &base, &config, &data, &pairs).unwrap();
        assert_eq!(one, three);
        let best = one.best_trial.unwrap();
        let best_wer = one.trials[best].eval_wer.unwrap();
        for t in &one.trials {
            assert!(best_wer <= t.eval_wer.unwrap());
            assert_eq!(t.test_wer.is_some(), t.id == best);
        }
        let mut table = Vec::new();
        write_trial_table(&mut table, &one.trials).unwrap();
        let text = String::from_utf8(table).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().all(|l| l.split('\t').count() == 16));

        config.trials = 1;
        let single = random_search(Family::Seq2Seq, &space, &base, &config, &data, &[]).unwrap();
        assert_eq!(single.best_trial, Some(0));
        assert!(single.best.is_some());
    }

    #[test]
    fn failed_trials_are_recorded() {
        let pairs = corpus();
        let sv = CodepointVocabulary::build(pairs.iter().map(|p| &p.source));
        let tv = CodepointVocabulary::build(["x"]);
        let data = TrainData {
            train: &pairs,
            eval: &pairs,
            source_vocab: &sv,
            target_vocab: &tv,
            normalize_source: false,
        };
        let config = SearchConfig {
            trials: 2,
            workers: 2,
            seed: 1,
            train: TrainConfig::default(),
        };
        let space = SearchSpace::preset(Family::Ei);
        let out = random_search(
            Family::Ei,
            &space,
            &Hyperparameters::defaults(Family::Ei),
            &config,
            &data,
            &[],
        )
        .unwrap();
        assert!(out.best.is_none());
        assert!(out.trials.iter().all(|t| t.error.is_some()));
    }
}
