//! Attentional encoder-decoder.
//!
//! The encoder reads source embeddings (back to front when
//! `reverse_source` is set) through a possibly bidirectional stack and emits
//! one annotation per position. The decoder is a unidirectional stack fed
//! with target embeddings; its initial hidden states are affine maps of the
//! encoder summary (last forward state, first backward state). At every step
//! the decoder state queries the annotations with additive attention
//!
//! ```text
//! score_j = v · tanh(W_q s_t + W_k a_j)    α = softmax(score)    c_t = Σ α_j a_j
//! ```
//!
//! and `[s_t; c_t]` is projected to target-vocabulary logits.

use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, CellState, Embedding, LayerStack, StackTrace};
use crate::dataset::{EOS, GO};
use crate::model::{DecodeOptions, ModelError};
use crate::rng::Rng;
use crate::tensor::{dot, log_softmax_unchecked, softmax_unchecked, ParamTensors, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub cell: CellKind,
    /// Layers in the encoder and in the decoder.
    pub layers: usize,
    /// Units per direction.
    pub hidden: usize,
    pub embedding: usize,
    pub attention: usize,
    pub bidirectional: bool,
    pub reverse_source: bool,
    pub source_vocab: usize,
    pub target_vocab: usize,
    #[serde(default)]
    pub forget_bias: f64,
}

impl Seq2SeqConfig {
    /// Width of one annotation (`2·hidden` for bidirectional encoders).
    pub fn annotation_width(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embedding", self.embedding),
            ("attention", self.attention),
            ("source_vocab", self.source_vocab),
            ("target_vocab", self.target_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.target_vocab <= EOS as usize {
            return Err(ModelError::Config(
                "target vocabulary lacks reserved ids".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `A × H`
    pub query: Tensor,
    /// `A × W` (W = annotation width)
    pub key: Tensor,
    /// `A × 1`
    pub score: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeLimits {
    pub max_len: usize,
    pub beam_width: usize,
}

impl DecodeLimits {
    pub fn new(max_len: usize, beam_width: usize) -> Result<Self, ModelError> {
        if max_len == 0 {
            return Err(ModelError::Limits("max length must be at least 1"));
        }
        if beam_width == 0 {
            return Err(ModelError::Limits("beam width must be at least 1"));
        }
        Ok(DecodeLimits {
            max_len,
            beam_width,
        })
    }

    /// Default cap of `2·source_len + 5`.
    pub fn for_source(source_len: usize, opts: &DecodeOptions) -> Result<Self, ModelError> {
        DecodeLimits::new(opts.max_len.unwrap_or(2 * source_len + 5), opts.beam_width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    pub config: Seq2SeqConfig,
    pub source_embedding: Embedding,
    pub encoder: LayerStack,
    pub target_embedding: Embedding,
    pub decoder: LayerStack,
    /// Per decoder layer: `H × W` map from the encoder summary.
    pub bridge_weights: Vec<Tensor>,
    pub bridge_biases: Vec<Tensor>,
    pub attention: AttentionParams,
    /// `V × (H + W)`
    pub output_weights: Tensor,
    pub output_bias: Tensor,
}

/// Encoder output kept for the decoder.
struct Encoded {
    ids: Vec<u32>,
    trace: StackTrace,
    keys: Vec<Vec<f64>>,
    summary: Vec<f64>,
}

struct StepCache {
    state: Vec<f64>,
    tanh: Vec<Vec<f64>>,
    weights: Vec<f64>,
    context: Vec<f64>,
    logp: Vec<f64>,
    probs: Vec<f64>,
}

/// Beam entry.
#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    logp: f64,
    states: Vec<CellState>,
}

impl Seq2SeqModel {
    pub fn init(config: Seq2SeqConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.hidden;
        let w = config.annotation_width();
        let a = config.attention;
        let v = config.target_vocab;
        let source_embedding = Embedding::init(config.source_vocab, config.embedding, rng);
        let encoder = LayerStack::init(
            config.cell,
            config.embedding,
            h,
            config.layers,
            config.bidirectional,
            config.forget_bias,
            rng,
        );
        let target_embedding = Embedding::init(v, config.embedding, rng);
        let decoder = LayerStack::init(
            config.cell,
            config.embedding,
            h,
            config.layers,
            false,
            config.forget_bias,
            rng,
        );
        let ws = 1.0 / (w as f64).sqrt();
        let bridge_weights = (0..config.layers)
            .map(|_| Tensor::uniform(h, w, ws, rng))
            .collect();
        let bridge_biases = (0..config.layers).map(|_| Tensor::zeros(h, 1)).collect();
        let attention = AttentionParams {
            query: Tensor::uniform(a, h, 1.0 / (h as f64).sqrt(), rng),
            key: Tensor::uniform(a, w, ws, rng),
            score: Tensor::uniform(a, 1, 1.0 / (a as f64).sqrt(), rng),
        };
        let output_weights = Tensor::uniform(v, h + w, 1.0 / ((h + w) as f64).sqrt(), rng);
        Ok(Seq2SeqModel {
            config,
            source_embedding,
            encoder,
            target_embedding,
            decoder,
            bridge_weights,
            bridge_biases,
            attention,
            output_weights,
            output_bias: Tensor::zeros(v, 1),
        })
    }

    /// Annotations for `source_ids` using the configured reading direction.
    pub fn encode(&self, source_ids: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.encode_with(source_ids, self.config.reverse_source)
    }

    /// Annotations in consumption order: with `reverse` set, annotation 0
    /// belongs to the last source symbol.
    pub fn encode_with(
        &self,
        source_ids: &[u32],
        reverse: bool,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(self.run_encoder(source_ids, reverse)?.trace.outputs)
    }

    fn run_encoder(&self, source_ids: &[u32], reverse: bool) -> Result<Encoded, ModelError> {
        if source_ids.is_empty() {
            return Err(ModelError::EmptySource);
        }
        let mut ids = source_ids.to_vec();
        if reverse {
            ids.reverse();
        }
        let inputs = ids
            .iter()
            .map(|&id| self.source_embedding.lookup(id).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>, _>>()?;
        let trace = self.encoder.trace(&inputs, None);
        let keys = trace
            .outputs
            .iter()
            .map(|a| {
                let mut k = vec![0.0; self.config.attention];
                self.attention.key.matvec_acc(a, &mut k);
                k
            })
            .collect();
        let summary = self.summary(&trace.outputs);
        Ok(Encoded {
            ids,
            trace,
            keys,
            summary,
        })
    }

    fn summary(&self, annotations: &[Vec<f64>]) -> Vec<f64> {
        let h = self.config.hidden;
        let last = &annotations[annotations.len() - 1];
        if self.config.bidirectional {
            let mut s = last[..h].to_vec();
            s.extend_from_slice(&annotations[0][h..]);
            s
        } else {
            last.clone()
        }
    }

    fn initial_states(&self, summary: &[f64]) -> Vec<CellState> {
        let lstm = self.config.cell == CellKind::Lstm;
        self.bridge_weights
            .iter()
            .zip(&self.bridge_biases)
            .map(|(w, b)| {
                let mut h = b.as_slice().to_vec();
                w.matvec_acc(summary, &mut h);
                CellState {
                    c: if lstm { vec![0.0; h.len()] } else { Vec::new() },
                    h,
                }
            })
            .collect()
    }

    /// Additive attention followed by the output projection.
    fn read_out(&self, enc: &Encoded, state: &[f64]) -> StepCache {
        let a = self.config.attention;
        let mut q = vec![0.0; a];
        self.attention.query.matvec_acc(state, &mut q);
        let v = self.attention.score.as_slice();
        let mut tanh = Vec::with_capacity(enc.keys.len());
        let mut scores = Vec::with_capacity(enc.keys.len());
        for k in &enc.keys {
            let u: Vec<f64> = q.iter().zip(k).map(|(x, y)| (x + y).tanh()).collect();
            scores.push(dot(v, &u));
            tanh.push(u);
        }
        let weights = softmax_unchecked(&scores);
        let annotations = &enc.trace.outputs;
        let mut context = vec![0.0; self.config.annotation_width()];
        for (wj, aj) in weights.iter().zip(annotations) {
            for (c, x) in context.iter_mut().zip(aj) {
                *c += wj * x;
            }
        }
        let mut logits = self.output_bias.as_slice().to_vec();
        self.output_weights
            .matvec_acc(&[state, context.as_slice()].concat(), &mut logits);
        let logp = log_softmax_unchecked(&logits);
        let probs = logp.iter().map(|x| x.exp()).collect();
        StepCache {
            state: state.to_vec(),
            tanh,
            weights,
            context,
            logp,
            probs,
        }
    }

    /// Mean per-symbol negative log-likelihood of `target_ids` (which must
    /// end with the end-of-sequence id) under teacher forcing, and the exact
    /// gradient for every parameter.
    pub fn teacher_forced_loss(
        &self,
        source_ids: &[u32],
        target_ids: &[u32],
    ) -> Result<(f64, Seq2SeqModel), ModelError> {
        if target_ids.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        if target_ids.last() != Some(&EOS) {
            return Err(ModelError::MissingEos);
        }
        let vocab = self.config.target_vocab;
        if let Some(&id) = target_ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(ModelError::IdOutOfRange { id, size: vocab });
        }
        let enc = self.run_encoder(source_ids, self.config.reverse_source)?;
        let init = self.initial_states(&enc.summary);
        let mut dec_ids = Vec::with_capacity(target_ids.len());
        dec_ids.push(GO);
        dec_ids.extend_from_slice(&target_ids[..target_ids.len() - 1]);
        let dec_inputs: Vec<Vec<f64>> = dec_ids
            .iter()
            .map(|&id| self.target_embedding.lookup(id).map(<[f64]>::to_vec))
            .collect::<Result<_, _>>()?;
        let dec_trace = self.decoder.trace(&dec_inputs, Some(&init));

        let steps = target_ids.len();
        let norm = 1.0 / steps as f64;
        let caches: Vec<StepCache> = dec_trace
            .outputs
            .iter()
            .map(|s| self.read_out(&enc, s))
            .collect();
        let loss = -norm
            * caches
                .iter()
                .zip(target_ids)
                .map(|(c, &gold)| c.logp[gold as usize])
                .sum::<f64>();

        let mut grads = crate::tensor::zeros_like(self);
        let w = self.config.annotation_width();
        let h = self.config.hidden;
        let annotations = &enc.trace.outputs;
        let mut d_ann = vec![vec![0.0; w]; annotations.len()];
        let mut d_keys = vec![vec![0.0; self.config.attention]; annotations.len()];
        let mut d_dec = Vec::with_capacity(steps);
        for (cache, &gold) in caches.iter().zip(target_ids) {
            let mut d_logits: Vec<f64> = cache.probs.iter().map(|p| p * norm).collect();
            d_logits[gold as usize] -= norm;
            let features = [cache.state.as_slice(), cache.context.as_slice()].concat();
            grads.output_weights.add_outer(&d_logits, &features);
            grads.output_bias.add_to_slice(&d_logits);
            let mut d_features = vec![0.0; h + w];
            self.output_weights.matvec_t_acc(&d_logits, &mut d_features);
            let (d_state_direct, d_context) = d_features.split_at(h);
            let mut d_state = d_state_direct.to_vec();

            // context = Σ α_j a_j
            let d_alpha: Vec<f64> = annotations.iter().map(|a| dot(d_context, a)).collect();
            for (da, &alpha) in d_ann.iter_mut().zip(&cache.weights) {
                for (x, dc) in da.iter_mut().zip(d_context) {
                    *x += alpha * dc;
                }
            }
            let mean: f64 = cache.weights.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
            let v = self.attention.score.as_slice();
            let mut d_query = vec![0.0; self.config.attention];
            for j in 0..annotations.len() {
                let d_score = cache.weights[j] * (d_alpha[j] - mean);
                let u = &cache.tanh[j];
                grads
                    .attention
                    .score
                    .as_mut_slice()
                    .iter_mut()
                    .zip(u)
                    .for_each(|(g, uk)| *g += d_score * uk);
                for k in 0..u.len() {
                    let d_pre = d_score * v[k] * (1.0 - u[k] * u[k]);
                    d_query[k] += d_pre;
                    d_keys[j][k] += d_pre;
                }
            }
            grads.attention.query.add_outer(&d_query, &cache.state);
            self.attention.query.matvec_t_acc(&d_query, &mut d_state);
            d_dec.push(d_state);
        }
        for (j, dk) in d_keys.iter().enumerate() {
            grads.attention.key.add_outer(dk, &annotations[j]);
            self.attention.key.matvec_t_acc(dk, &mut d_ann[j]);
        }

        let (d_dec_inputs, d_init) =
            self.decoder
                .backprop_trace(&dec_trace, &d_dec, &mut grads.decoder);
        for (&id, d) in dec_ids.iter().zip(&d_dec_inputs) {
            grads.target_embedding.accumulate(id, d);
        }
        let mut d_summary = vec![0.0; w];
        for (l, d) in d_init.iter().enumerate() {
            grads.bridge_weights[l].add_outer(&d.h, &enc.summary);
            grads.bridge_biases[l].add_to_slice(&d.h);
            self.bridge_weights[l].matvec_t_acc(&d.h, &mut d_summary);
        }
        let last = annotations.len() - 1;
        if self.config.bidirectional {
            for k in 0..h {
                d_ann[last][k] += d_summary[k];
                d_ann[0][h + k] += d_summary[h + k];
            }
        } else {
            for (x, d) in d_ann[last].iter_mut().zip(&d_summary) {
                *x += d;
            }
        }
        let (d_src, _) = self
            .encoder
            .backprop_trace(&enc.trace, &d_ann, &mut grads.encoder);
        for (&id, d) in enc.ids.iter().zip(&d_src) {
            grads.source_embedding.accumulate(id, d);
        }
        Ok((loss, grads))
    }

    fn step(
        &self,
        enc: &Encoded,
        token: u32,
        states: &[CellState],
    ) -> Result<(Vec<f64>, Vec<CellState>), ModelError> {
        let x = self.target_embedding.lookup(token)?;
        let (out, next) = self.decoder.step(x, states)?;
        Ok((self.read_out(enc, &out).logp, next))
    }

    /// Attention weights the decoder would use at every step while
    /// teacher-forced on `target_ids`.
    pub fn attention_weights(
        &self,
        source_ids: &[u32],
        target_ids: &[u32],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let enc = self.run_encoder(source_ids, self.config.reverse_source)?;
        let mut states = self.initial_states(&enc.summary);
        let mut prev = GO;
        let mut out = Vec::with_capacity(target_ids.len());
        for &gold in target_ids {
            let x = self.target_embedding.lookup(prev)?;
            let (s, next) = self.decoder.step(x, &states)?;
            out.push(self.read_out(&enc, &s).weights);
            states = next;
            prev = gold;
        }
        Ok(out)
    }

    /// Feeds back the argmax symbol (lowest id on ties) until EOS or the
    /// length cap. EOS is not part of the output.
    pub fn greedy_decode(
        &self,
        source_ids: &[u32],
        limits: &DecodeLimits,
    ) -> Result<Vec<u32>, ModelError> {
        let enc = self.run_encoder(source_ids, self.config.reverse_source)?;
        let mut states = self.initial_states(&enc.summary);
        let mut prev = GO;
        let mut out = Vec::new();
        while out.len() < limits.max_len {
            let (logp, next) = self.step(&enc, prev, &states)?;
            let mut best = 0;
            for (i, &v) in logp.iter().enumerate().skip(1) {
                if v > logp[best] {
                    best = i;
                }
            }
            if best as u32 == EOS {
                break;
            }
            out.push(best as u32);
            prev = best as u32;
            states = next;
        }
        Ok(out)
    }

    /// Beam search. Live hypotheses compete on total log-probability (they
    /// all have equal length); finished ones are ranked by log-probability
    /// divided by their length, EOS included. Ties go to the
    /// lexicographically smaller token sequence. Width 1 reproduces
    /// [`greedy_decode`](Self::greedy_decode).
    pub fn beam_decode(
        &self,
        source_ids: &[u32],
        limits: &DecodeLimits,
    ) -> Result<Vec<u32>, ModelError> {
        let enc = self.run_encoder(source_ids, self.config.reverse_source)?;
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            logp: 0.0,
            states: self.initial_states(&enc.summary),
        }];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        while !live.is_empty() {
            let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
            let mut next_states = Vec::with_capacity(live.len());
            for (hi, hyp) in live.iter().enumerate() {
                let prev = hyp.tokens.last().copied().unwrap_or(GO);
                let (logp, next) = self.step(&enc, prev, &hyp.states)?;
                for (tok, lp) in logp.iter().enumerate() {
                    candidates.push((hi, tok as u32, hyp.logp + lp));
                }
                next_states.push(next);
            }
            candidates.sort_by(|a, b| {
                b.2.total_cmp(&a.2).then_with(|| {
                    let ta = live[a.0].tokens.iter().chain(std::iter::once(&a.1));
                    let tb = live[b.0].tokens.iter().chain(std::iter::once(&b.1));
                    ta.cmp(tb)
                })
            });
            candidates.truncate(limits.beam_width);
            let mut survivors = Vec::new();
            for (hi, tok, logp) in candidates {
                let mut tokens = live[hi].tokens.clone();
                if tok == EOS {
                    let n = tokens.len() + 1;
                    finished.push((tokens, logp / n as f64));
                    continue;
                }
                tokens.push(tok);
                if tokens.len() >= limits.max_len {
                    let n = tokens.len();
                    finished.push((tokens, logp / n as f64));
                    continue;
                }
                survivors.push(Hypothesis {
                    tokens,
                    logp,
                    states: next_states[hi].clone(),
                });
            }
            live = survivors;
        }
        finished.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(finished
            .into_iter()
            .next()
            .map(|(t, _)| t)
            .unwrap_or_default())
    }
}

/// Additive attention of `query` over `annotations`, computed directly from
/// the attention parameters.
pub fn attend(
    params: &AttentionParams,
    query: &[f64],
    annotations: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if annotations.is_empty() {
        return Err(ModelError::EmptySource);
    }
    let projected = params
        .query
        .matvec(query)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let mut scores = Vec::with_capacity(annotations.len());
    for a in annotations {
        let k = params
            .key
            .matvec(a)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let u: Vec<f64> = projected
            .iter()
            .zip(&k)
            .map(|(x, y)| (x + y).tanh())
            .collect();
        scores.push(dot(params.score.as_slice(), &u));
    }
    let weights = softmax_unchecked(&scores);
    let mut context = vec![0.0; annotations[0].len()];
    for (w, a) in weights.iter().zip(annotations) {
        for (c, x) in context.iter_mut().zip(a) {
            *c += w * x;
        }
    }
    Ok((context, weights))
}

impl ParamTensors for Seq2SeqModel {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("source_embedding".to_string(), &self.source_embedding.table)];
        self.encoder.named_into("encoder", &mut out);
        out.push(("target_embedding".to_string(), &self.target_embedding.table));
        self.decoder.named_into("decoder", &mut out);
        for (l, (w, b)) in self
            .bridge_weights
            .iter()
            .zip(&self.bridge_biases)
            .enumerate()
        {
            out.push((format!("bridge.l{l}.weight"), w));
            out.push((format!("bridge.l{l}.bias"), b));
        }
        out.push(("attention.query".to_string(), &self.attention.query));
        out.push(("attention.key".to_string(), &self.attention.key));
        out.push(("attention.score".to_string(), &self.attention.score));
        out.push(("output.weight".to_string(), &self.output_weights));
        out.push(("output.bias".to_string(), &self.output_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.source_embedding.table];
        self.encoder.mut_into(&mut out);
        out.push(&mut self.target_embedding.table);
        self.decoder.mut_into(&mut out);
        for (w, b) in self
            .bridge_weights
            .iter_mut()
            .zip(self.bridge_biases.iter_mut())
        {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.attention.query);
        out.push(&mut self.attention.key);
        out.push(&mut self.attention.score);
        out.push(&mut self.output_weights);
        out.push(&mut self.output_bias);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Layer;
    use crate::tensor::grad_check;

    fn tiny(cell: CellKind, layers: usize, bidi: bool, reverse: bool, seed: u64) -> Seq2SeqModel {
        let config = Seq2SeqConfig {
            cell,
            layers,
            hidden: 4,
            embedding: 3,
            attention: 3,
            bidirectional: bidi,
            reverse_source: reverse,
            source_vocab: 7,
            target_vocab: 7,
            forget_bias: 0.0,
        };
        Seq2SeqModel::init(config, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn annotation_count_matches_source() {
        let m = tiny(CellKind::Gru, 2, true, true, 1);
        for n in 1..6 {
            let src: Vec<u32> = (0..n).map(|i| 4 + (i % 3)).collect();
            let ann = m.encode(&src).unwrap();
            assert_eq!(ann.len(), n as usize);
            assert!(ann.iter().all(|a| a.len() == 8));
        }
        assert_eq!(m.encode(&[]), Err(ModelError::EmptySource));
        assert!(matches!(
            m.encode(&[4, 99]),
            Err(ModelError::IdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn reverse_consumes_back_to_front() {
        let m = tiny(CellKind::Lstm, 1, false, true, 2);
        let forward = m.encode_with(&[4, 5, 6], false).unwrap();
        let reversed = m.encode_with(&[4, 5, 6], true).unwrap();
        let explicit = m.encode_with(&[6, 5, 4], false).unwrap();
        assert_eq!(reversed, explicit);
        assert_ne!(reversed, forward);
    }

    #[test]
    fn tied_bidirectional_encoder_reversal_is_a_permutation() {
        // with identical forward/backward cells, reading reversed input swaps
        // the halves and mirrors positions
        let mut m = tiny(CellKind::Gru, 1, true, false, 3);
        let fwd = m.encoder.layers()[0].forward.clone();
        m.encoder = LayerStack::from_layers(vec![Layer {
            forward: fwd.clone(),
            backward: Some(fwd),
        }])
        .unwrap();
        let src = [4, 6, 5, 5, 4];
        let plain = m.encode_with(&src, false).unwrap();
        let rev = m.encode_with(&src, true).unwrap();
        let n = src.len();
        for k in 0..n {
            let orig = &plain[n - 1 - k];
            let swapped: Vec<f64> = orig[4..].iter().chain(&orig[..4]).copied().collect();
            assert_eq!(rev[k], swapped);
        }
    }

    #[test]
    fn attention_weights_and_context() {
        let mut rng = Rng::new(8);
        let params = AttentionParams {
            query: Tensor::uniform(3, 2, 1.0, &mut rng),
            key: Tensor::uniform(3, 4, 1.0, &mut rng),
            score: Tensor::uniform(3, 1, 1.0, &mut rng),
        };
        let anns: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let (ctx, w) = attend(&params, &[0.3, -0.2], &anns).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..4 {
            let lo = anns.iter().map(|a| a[k]).fold(f64::INFINITY, f64::min);
            let hi = anns.iter().map(|a| a[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(ctx[k] >= lo - 1e-9 && ctx[k] <= hi + 1e-9);
        }
        // single annotation: context is that annotation
        let (ctx, w) = attend(&params, &[0.3, -0.2], &anns[..1]).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(ctx, anns[0]);
        // zero score vector: uniform weights and mean context
        let flat = AttentionParams {
            score: Tensor::zeros(3, 1),
            ..params
        };
        let (ctx, w) = attend(&flat, &[0.3, -0.2], &anns).unwrap();
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-15));
        for k in 0..4 {
            let mean = anns.iter().map(|a| a[k]).sum::<f64>() / 5.0;
            assert!((ctx[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_output_gives_ln_v() {
        let mut m = tiny(CellKind::Gru, 1, false, true, 4);
        m.output_weights.fill(0.0);
        m.output_bias.fill(0.0);
        let (loss, _) = m.teacher_forced_loss(&[4, 5], &[6, 4, EOS]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_output_gives_zero_loss() {
        // bias dominates: always emits EOS with probability ~1
        let mut m = tiny(CellKind::Gru, 1, false, true, 5);
        m.output_weights.fill(0.0);
        m.output_bias.fill(-400.0);
        m.output_bias.as_mut_slice()[EOS as usize] = 400.0;
        let (loss, _) = m.teacher_forced_loss(&[4], &[EOS]).unwrap();
        assert!(loss.abs() < 1e-12);
        let limits = DecodeLimits::new(10, 1).unwrap();
        assert!(m.greedy_decode(&[4, 5], &limits).unwrap().is_empty());
    }

    #[test]
    fn target_validation() {
        let m = tiny(CellKind::Gru, 1, false, true, 6);
        assert_eq!(
            m.teacher_forced_loss(&[4], &[]).unwrap_err(),
            ModelError::EmptyTarget
        );
        assert_eq!(
            m.teacher_forced_loss(&[4], &[5]).unwrap_err(),
            ModelError::MissingEos
        );
        assert!(matches!(
            m.teacher_forced_loss(&[4], &[50, EOS]),
            Err(ModelError::IdOutOfRange { id: 50, .. })
        ));
    }

    fn check_grads(m: &Seq2SeqModel, src: &[u32], tgt: &[u32]) -> f64 {
        let (_, g) = m.teacher_forced_loss(src, tgt).unwrap();
        let mut probe = m.clone();
        grad_check(
            |w| {
                probe.assign_flat(w).unwrap();
                probe.teacher_forced_loss(src, tgt).unwrap().0
            },
            &m.flatten(),
            &g.flatten(),
        )
        .unwrap()
    }

    #[test]
    fn end_to_end_gradients() {
        let cases = [
            (CellKind::Gru, 1, false, true),
            (CellKind::Lstm, 1, true, true),
            (CellKind::Gru, 2, true, false),
            (CellKind::Lstm, 2, false, false),
        ];
        for (i, &(cell, layers, bidi, rev)) in cases.iter().enumerate() {
            let m = tiny(cell, layers, bidi, rev, 10 + i as u64);
            let err = check_grads(&m, &[4, 6, 5], &[5, 6, 4, EOS]);
            assert!(err < 1e-4, "case {i}: {err}");
        }
    }

    #[test]
    fn width_one_beam_equals_greedy() {
        for seed in 0..100 {
            let m = tiny(CellKind::Gru, 1, seed % 2 == 0, true, 100 + seed);
            let src = [4 + (seed % 3) as u32, 5, 6];
            let limits = DecodeLimits::new(6, 1).unwrap();
            assert_eq!(
                m.beam_decode(&src, &limits).unwrap(),
                m.greedy_decode(&src, &limits).unwrap()
            );
        }
    }

    #[test]
    fn greedy_respects_length_cap() {
        let mut m = tiny(CellKind::Gru, 1, false, true, 7);
        // never emits EOS
        m.output_bias.as_mut_slice()[EOS as usize] = -100.0;
        let limits = DecodeLimits::new(4, 1).unwrap();
        assert_eq!(m.greedy_decode(&[4, 5], &limits).unwrap().len(), 4);
        assert!(DecodeLimits::new(0, 1).is_err());
        assert!(DecodeLimits::new(3, 0).is_err());
    }

    fn exhaustive_best(m: &Seq2SeqModel, src: &[u32], max_len: usize) -> Vec<u32> {
        // score every EOS-terminated sequence (and every capped one) by
        // teacher-forced log-probability per emitted symbol
        let v = m.config.target_vocab as u32;
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut consider = |tokens: Vec<u32>, score: f64| {
            let better = match &best {
                None => true,
                Some((bt, bs)) => score > *bs || (score == *bs && tokens < *bt),
            };
            if better {
                best = Some((tokens, score));
            }
        };
        let mut frontier: Vec<Vec<u32>> = vec![vec![]];
        for len in 0..=max_len {
            let mut next = Vec::new();
            for prefix in &frontier {
                let logp_prefix = seq_logp(m, src, prefix);
                if len == max_len {
                    consider(prefix.clone(), logp_prefix / len as f64);
                    continue;
                }
                let mut with_eos = prefix.clone();
                with_eos.push(EOS);
                consider(
                    prefix.clone(),
                    seq_logp(m, src, &with_eos) / (len + 1) as f64,
                );
                for t in 0..v {
                    if t != EOS {
                        let mut p = prefix.clone();
                        p.push(t);
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
        best.unwrap().0
    }

    fn seq_logp(m: &Seq2SeqModel, src: &[u32], tokens: &[u32]) -> f64 {
        if tokens.is_empty() {
            return 0.0;
        }
        // teacher-forced mean NLL times length is the summed log-probability,
        // whether or not the sequence ends in EOS
        let enc = m.run_encoder(src, m.config.reverse_source).unwrap();
        let mut states = m.initial_states(&enc.summary);
        let mut prev = GO;
        let mut total = 0.0;
        for &t in tokens {
            let (lp, next) = m.step(&enc, prev, &states).unwrap();
            total += lp[t as usize];
            states = next;
            prev = t;
        }
        total
    }

    #[test]
    fn wide_beam_matches_enumeration() {
        for seed in 0..20 {
            let config = Seq2SeqConfig {
                cell: CellKind::Gru,
                layers: 1,
                hidden: 3,
                embedding: 2,
                attention: 2,
                bidirectional: false,
                reverse_source: true,
                source_vocab: 5,
                target_vocab: 5,
                forget_bias: 0.0,
            };
            let mut m = Seq2SeqModel::init(config, &mut Rng::new(seed)).unwrap();
            // sharpen the output so sequences are well separated
            m.output_weights.scale(4.0);
            let limits = DecodeLimits::new(3, 125).unwrap();
            assert_eq!(
                m.beam_decode(&[4, 4], &limits).unwrap(),
                exhaustive_best(&m, &[4, 4], 3),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let m = tiny(CellKind::Lstm, 2, true, true, 77);
        let limits = DecodeLimits::new(8, 3).unwrap();
        let a = m.beam_decode(&[4, 5, 6, 5], &limits).unwrap();
        for _ in 0..5 {
            assert_eq!(m.beam_decode(&[4, 5, 6, 5], &limits).unwrap(), a);
        }
    }

    #[test]
    fn teacher_forcing_matches_stepwise_attention() {
        let m = tiny(CellKind::Gru, 2, true, true, 12);
        let w = m.attention_weights(&[4, 5, 6], &[5, 6, EOS]).unwrap();
        assert_eq!(w.len(), 3);
        for row in w {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
