//! Epsilon-insertion model: the source is padded with epsilons, run through a
//! recurrent stack, and every position emits a distribution over target ids
//! (id 0 doubling as the CTC blank). Training marginalizes over alignments
//! with CTC.

use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, Embedding, LayerStack};
use crate::ctc::{ctc_beam_decode, ctc_greedy_decode, ctc_loss, insert_epsilons};
use crate::dataset::EPSILON;
use crate::model::ModelError;
use crate::rng::Rng;
use crate::tensor::{log_softmax_unchecked, ParamTensors, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EiConfig {
    pub cell: CellKind,
    pub layers: usize,
    /// Units per direction.
    pub hidden: usize,
    pub embedding: usize,
    pub bidirectional: bool,
    /// Epsilons inserted before each source symbol and after the last.
    pub epsilons: usize,
    pub source_vocab: usize,
    pub target_vocab: usize,
    #[serde(default)]
    pub forget_bias: f64,
}

impl EiConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embedding", self.embedding),
            ("source_vocab", self.source_vocab),
            ("target_vocab", self.target_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.target_vocab < 2 {
            return Err(ModelError::Config(
                "target vocabulary needs a blank and a symbol".into(),
            ));
        }
        Ok(())
    }

    /// Frames produced for a source of `len` symbols.
    pub fn frames_for(&self, len: usize) -> usize {
        self.epsilons * (len + 1) + len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EiModel {
    pub config: EiConfig,
    pub embedding: Embedding,
    pub stack: LayerStack,
    /// `V × W`
    pub output_weights: Tensor,
    pub output_bias: Tensor,
}

impl EiModel {
    pub fn init(config: EiConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let embedding = Embedding::init(config.source_vocab, config.embedding, rng);
        let stack = LayerStack::init(
            config.cell,
            config.embedding,
            config.hidden,
            config.layers,
            config.bidirectional,
            config.forget_bias,
            rng,
        );
        let w = stack.output_size();
        let output_weights = Tensor::uniform(config.target_vocab, w, 1.0 / (w as f64).sqrt(), rng);
        Ok(EiModel {
            embedding,
            stack,
            output_weights,
            output_bias: Tensor::zeros(config.target_vocab, 1),
            config,
        })
    }

    fn expand(&self, source_ids: &[u32]) -> Result<Vec<u32>, ModelError> {
        if source_ids.is_empty() {
            return Err(ModelError::EmptySource);
        }
        Ok(insert_epsilons(source_ids, self.config.epsilons, EPSILON))
    }

    fn embed(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        ids.iter()
            .map(|&id| Ok(self.embedding.lookup(id)?.to_vec()))
            .collect()
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        let mut logits = self.output_bias.as_slice().to_vec();
        self.output_weights.matvec_acc(h, &mut logits);
        log_softmax_unchecked(&logits)
    }

    /// `T × V` table of per-frame log-probabilities.
    pub fn frame_logprobs(&self, source_ids: &[u32]) -> Result<Tensor, ModelError> {
        let ids = self.expand(source_ids)?;
        let trace = self.stack.trace(&self.embed(&ids)?, None);
        let rows: Vec<Vec<f64>> = trace.outputs.iter().map(|h| self.project(h)).collect();
        Ok(Tensor::from_rows(&rows).expect("rows share the vocabulary width"))
    }

    /// CTC negative log-likelihood of `target_ids` (content ids, no EOS) and
    /// the gradient for every parameter.
    pub fn loss(
        &self,
        source_ids: &[u32],
        target_ids: &[u32],
    ) -> Result<(f64, EiModel), ModelError> {
        let ids = self.expand(source_ids)?;
        let trace = self.stack.trace(&self.embed(&ids)?, None);
        let rows: Vec<Vec<f64>> = trace.outputs.iter().map(|h| self.project(h)).collect();
        let table = Tensor::from_rows(&rows).expect("rows share the vocabulary width");
        let (nll, g) = ctc_loss(&table, target_ids)?;

        let mut grads = crate::tensor::zeros_like(self);
        let w = self.stack.output_size();
        let mut d_top = Vec::with_capacity(rows.len());
        for (t, logp) in rows.iter().enumerate() {
            let gt = g.row(t);
            let total: f64 = gt.iter().sum();
            let d_logits: Vec<f64> = gt
                .iter()
                .zip(logp)
                .map(|(gi, lp)| gi - lp.exp() * total)
                .collect();
            grads.output_weights.add_outer(&d_logits, &trace.outputs[t]);
            grads.output_bias.add_to_slice(&d_logits);
            let mut dh = vec![0.0; w];
            self.output_weights.matvec_t_acc(&d_logits, &mut dh);
            d_top.push(dh);
        }
        let (d_inputs, _) = self.stack.backprop_trace(&trace, &d_top, &mut grads.stack);
        for (&id, d) in ids.iter().zip(&d_inputs) {
            grads.embedding.accumulate(id, d);
        }
        Ok((nll, grads))
    }

    pub fn greedy_decode(&self, source_ids: &[u32]) -> Result<Vec<u32>, ModelError> {
        Ok(ctc_greedy_decode(&self.frame_logprobs(source_ids)?))
    }

    pub fn beam_decode(&self, source_ids: &[u32], width: usize) -> Result<Vec<u32>, ModelError> {
        Ok(ctc_beam_decode(&self.frame_logprobs(source_ids)?, width)?)
    }
}

impl ParamTensors for EiModel {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding.table)];
        self.stack.named_into("encoder", &mut out);
        out.push(("output.weight".to_string(), &self.output_weights));
        out.push(("output.bias".to_string(), &self.output_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding.table];
        self.stack.mut_into(&mut out);
        out.push(&mut self.output_weights);
        out.push(&mut self.output_bias);
        out
    }
}
