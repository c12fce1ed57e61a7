//! LSTM and GRU cells, embeddings, stacked/bidirectional sequence runners,
//! and backpropagation through time.
//!
//! Weight layout (fixed, checkpoints depend on it):
//!
//! * LSTM: `input` is `4H × D`, `recurrent` is `4H × H`, `bias` is `4H × 1`,
//!   gate blocks stacked in the order input (i), forget (f), candidate (g),
//!   output (o).
//! * GRU: `input` is `3H × D`, `recurrent` is `3H × H`, `bias` is `3H × 1`,
//!   blocks stacked as update (z), reset (r), candidate (n).
//!
//! ```text
//! LSTM: i,f,o = σ(W x + U h + b)   g = tanh(W x + U h + b)
//!       c' = f⊙c + i⊙g             h' = o⊙tanh(c')
//! GRU:  z,r = σ(W x + U h + b)     n = tanh(W_n x + U_n (r⊙h) + b_n)
//!       h' = (1 − z)⊙h + z⊙n
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{sigmoid, ParamTensors, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("id {id} outside table of {size} rows")]
    IdOutOfRange { id: u32, size: usize },
    #[error("step-wise execution requires a unidirectional stack")]
    NotUnidirectional,
    #[error("inconsistent layer stack: {0}")]
    Inconsistent(String),
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), CellError> {
    if v.len() != expected {
        return Err(CellError::Dimension {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(format!(
                "unknown cell kind {other:?} (expected lstm or gru)"
            )),
        }
    }
}

/// Gate weights shared by both cell kinds; the number of stacked gate
/// blocks is 4 for LSTM and 3 for GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub input: Tensor,
    pub recurrent: Tensor,
    pub bias: Tensor,
}

pub type LstmParams = GateParams;
pub type GruParams = GateParams;

impl GateParams {
    pub fn zeros(kind: CellKind, input_size: usize, hidden: usize) -> Self {
        let rows = kind.gates() * hidden;
        GateParams {
            input: Tensor::zeros(rows, input_size),
            recurrent: Tensor::zeros(rows, hidden),
            bias: Tensor::zeros(rows, 1),
        }
    }

    /// Uniform `(-1/√fan_in, 1/√fan_in)` weights, zero biases. For LSTM the
    /// forget-gate bias block is set to `forget_bias`.
    pub fn init(
        kind: CellKind,
        input_size: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut Rng,
    ) -> Self {
        let rows = kind.gates() * hidden;
        let input = Tensor::uniform(
            rows,
            input_size,
            1.0 / (input_size.max(1) as f64).sqrt(),
            rng,
        );
        let recurrent = Tensor::uniform(rows, hidden, 1.0 / (hidden.max(1) as f64).sqrt(), rng);
        let mut bias = Tensor::zeros(rows, 1);
        if kind == CellKind::Lstm {
            bias.as_mut_slice()[hidden..2 * hidden].fill(forget_bias);
        }
        GateParams {
            input,
            recurrent,
            bias,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent.cols()
    }

    pub fn input_size(&self) -> usize {
        self.input.cols()
    }

    fn check(&self, kind: CellKind) -> Result<(), CellError> {
        let h = self.hidden_size();
        let rows = kind.gates() * h;
        if self.input.rows() != rows || self.recurrent.rows() != rows || self.bias.len() != rows {
            return Err(CellError::Inconsistent(format!(
                "{kind} gate blocks must have {rows} rows for hidden size {h}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    /// Memory cell; empty for GRU.
    pub c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct LstmCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// activated gates i, f, g, o
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) enum StepCache {
    Lstm(LstmCache),
    Gru(GruCache),
}

fn lstm_forward(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (CellState, LstmCache) {
    let hs = p.hidden_size();
    let mut pre = p.bias.as_slice().to_vec();
    p.input.matvec_acc(x, &mut pre);
    p.recurrent.matvec_acc(h, &mut pre);
    let mut gates = pre;
    for (k, v) in gates.iter_mut().enumerate() {
        *v = if (2 * hs..3 * hs).contains(&k) {
            v.tanh()
        } else {
            sigmoid(*v)
        };
    }
    let (i, rest) = gates.split_at(hs);
    let (f, rest) = rest.split_at(hs);
    let (g, o) = rest.split_at(hs);
    let mut c_new = vec![0.0; hs];
    let mut tanh_c = vec![0.0; hs];
    let mut h_new = vec![0.0; hs];
    for k in 0..hs {
        c_new[k] = f[k] * c[k] + i[k] * g[k];
        tanh_c[k] = c_new[k].tanh();
        h_new[k] = o[k] * tanh_c[k];
    }
    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        gates,
        tanh_c,
    };
    (CellState { h: h_new, c: c_new }, cache)
}

fn lstm_backward(
    p: &LstmParams,
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmParams,
    dx: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let hs = p.hidden_size();
    let g = &cache.gates;
    let mut dpre = vec![0.0; 4 * hs];
    let mut dc_prev = vec![0.0; hs];
    for k in 0..hs {
        let (i, f, gg, o) = (g[k], g[hs + k], g[2 * hs + k], g[3 * hs + k]);
        let tc = cache.tanh_c[k];
        let d_o = dh[k] * tc;
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dc_prev[k] = dct * f;
        dpre[k] = dct * gg * i * (1.0 - i);
        dpre[hs + k] = dct * cache.c_prev[k] * f * (1.0 - f);
        dpre[2 * hs + k] = dct * i * (1.0 - gg * gg);
        dpre[3 * hs + k] = d_o * o * (1.0 - o);
    }
    grads.bias.add_to_slice(&dpre);
    grads.input.add_outer(&dpre, &cache.x);
    grads.recurrent.add_outer(&dpre, &cache.h_prev);
    p.input.matvec_t_acc(&dpre, dx);
    let mut dh_prev = vec![0.0; hs];
    p.recurrent.matvec_t_acc(&dpre, &mut dh_prev);
    (dh_prev, dc_prev)
}

fn gru_forward(p: &GruParams, x: &[f64], h: &[f64]) -> (CellState, GruCache) {
    let hs = p.hidden_size();
    let mut pre = p.bias.as_slice().to_vec();
    p.input.matvec_acc(x, &mut pre);
    p.recurrent.matvec_rows_acc(0, h, &mut pre[..2 * hs]);
    let z: Vec<f64> = pre[..hs].iter().map(|&v| sigmoid(v)).collect();
    let r: Vec<f64> = pre[hs..2 * hs].iter().map(|&v| sigmoid(v)).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let mut cand = pre[2 * hs..].to_vec();
    p.recurrent.matvec_rows_acc(2 * hs, &rh, &mut cand);
    let n: Vec<f64> = cand.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..hs).map(|k| (1.0 - z[k]) * h[k] + z[k] * n[k]).collect();
    let cache = GruCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        z,
        r,
        n,
        rh,
    };
    (
        CellState {
            h: h_new,
            c: Vec::new(),
        },
        cache,
    )
}

fn gru_backward(
    p: &GruParams,
    cache: &GruCache,
    dh: &[f64],
    grads: &mut GruParams,
    dx: &mut [f64],
) -> Vec<f64> {
    let hs = p.hidden_size();
    let mut dpre = vec![0.0; 3 * hs];
    let mut dh_prev = vec![0.0; hs];
    for k in 0..hs {
        let (z, n, hp) = (cache.z[k], cache.n[k], cache.h_prev[k]);
        dh_prev[k] = dh[k] * (1.0 - z);
        dpre[k] = dh[k] * (n - hp) * z * (1.0 - z);
        dpre[2 * hs + k] = dh[k] * z * (1.0 - n * n);
    }
    // candidate block sees r⊙h through the recurrent weights
    let mut drh = vec![0.0; hs];
    p.recurrent
        .matvec_t_rows_acc(2 * hs, &dpre[2 * hs..], &mut drh);
    grads
        .recurrent
        .add_outer_rows(2 * hs, &dpre[2 * hs..], &cache.rh);
    for k in 0..hs {
        let r = cache.r[k];
        dh_prev[k] += drh[k] * r;
        dpre[hs + k] = drh[k] * cache.h_prev[k] * r * (1.0 - r);
    }
    grads
        .recurrent
        .add_outer_rows(0, &dpre[..2 * hs], &cache.h_prev);
    p.recurrent
        .matvec_t_rows_acc(0, &dpre[..2 * hs], &mut dh_prev);
    grads.bias.add_to_slice(&dpre);
    grads.input.add_outer(&dpre, &cache.x);
    p.input.matvec_t_acc(&dpre, dx);
    dh_prev
}

/// One recurrent cell of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Lstm(LstmParams),
    Gru(GruParams),
}

impl Cell {
    pub fn init(
        kind: CellKind,
        input_size: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut Rng,
    ) -> Self {
        let p = GateParams::init(kind, input_size, hidden, forget_bias, rng);
        match kind {
            CellKind::Lstm => Cell::Lstm(p),
            CellKind::Gru => Cell::Gru(p),
        }
    }

    pub fn zeros(kind: CellKind, input_size: usize, hidden: usize) -> Self {
        let p = GateParams::zeros(kind, input_size, hidden);
        match kind {
            CellKind::Lstm => Cell::Lstm(p),
            CellKind::Gru => Cell::Gru(p),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Lstm(_) => CellKind::Lstm,
            Cell::Gru(_) => CellKind::Gru,
        }
    }

    pub fn params(&self) -> &GateParams {
        match self {
            Cell::Lstm(p) | Cell::Gru(p) => p,
        }
    }

    pub fn params_mut(&mut self) -> &mut GateParams {
        match self {
            Cell::Lstm(p) | Cell::Gru(p) => p,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.params().hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.params().input_size()
    }

    pub fn zero_state(&self) -> CellState {
        let h = self.hidden_size();
        CellState {
            h: vec![0.0; h],
            c: match self {
                Cell::Lstm(_) => vec![0.0; h],
                Cell::Gru(_) => Vec::new(),
            },
        }
    }

    /// Checked single step.
    pub fn step(&self, x: &[f64], state: &CellState) -> Result<CellState, CellError> {
        check_len("cell input", x, self.input_size())?;
        check_len("hidden state", &state.h, self.hidden_size())?;
        if let Cell::Lstm(_) = self {
            check_len("memory cell", &state.c, self.hidden_size())?;
        }
        Ok(self.forward(x, state).0)
    }

    /// Gradients of `dh·h' + dc·c'` for one step from `state`: parameter
    /// gradients, input gradient, and gradient for the previous state.
    pub fn step_gradients(
        &self,
        x: &[f64],
        state: &CellState,
        dh: &[f64],
        dc: &[f64],
    ) -> Result<(Cell, Vec<f64>, CellState), CellError> {
        self.step(x, state)?;
        check_len("hidden gradient", dh, self.hidden_size())?;
        if let Cell::Lstm(_) = self {
            check_len("memory gradient", dc, self.hidden_size())?;
        }
        let (_, cache) = self.forward(x, state);
        let mut grads = crate::tensor::zeros_like(self);
        let mut dx = vec![0.0; self.input_size()];
        let d_prev = self.backward(&cache, dh, dc, &mut grads, &mut dx);
        Ok((grads, dx, d_prev))
    }

    pub(crate) fn forward(&self, x: &[f64], state: &CellState) -> (CellState, StepCache) {
        match self {
            Cell::Lstm(p) => {
                let (s, c) = lstm_forward(p, x, &state.h, &state.c);
                (s, StepCache::Lstm(c))
            }
            Cell::Gru(p) => {
                let (s, c) = gru_forward(p, x, &state.h);
                (s, StepCache::Gru(c))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and input gradients into
    /// `dx`; returns gradients for the previous state.
    pub(crate) fn backward(
        &self,
        cache: &StepCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut Cell,
        dx: &mut [f64],
    ) -> CellState {
        match (self, cache, grads) {
            (Cell::Lstm(p), StepCache::Lstm(c), Cell::Lstm(g)) => {
                let (h, c) = lstm_backward(p, c, dh, dc, g, dx);
                CellState { h, c }
            }
            (Cell::Gru(p), StepCache::Gru(c), Cell::Gru(g)) => CellState {
                h: gru_backward(p, c, dh, g, dx),
                c: Vec::new(),
            },
            _ => unreachable!("cell, cache and gradient kinds always agree"),
        }
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let p = self.params();
        out.push((format!("{prefix}.input"), &p.input));
        out.push((format!("{prefix}.recurrent"), &p.recurrent));
        out.push((format!("{prefix}.bias"), &p.bias));
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        let p = self.params_mut();
        out.push(&mut p.input);
        out.push(&mut p.recurrent);
        out.push(&mut p.bias);
    }
}

impl ParamTensors for Cell {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.push_named("cell", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

/// Single LSTM step with shape checks.
pub fn lstm_step(
    p: &LstmParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), CellError> {
    p.check(CellKind::Lstm)?;
    check_len("lstm input", x, p.input_size())?;
    check_len("lstm hidden", h, p.hidden_size())?;
    check_len("lstm cell", c, p.hidden_size())?;
    let (s, _) = lstm_forward(p, x, h, c);
    Ok((s.h, s.c))
}

/// Single GRU step with shape checks.
pub fn gru_step(p: &GruParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>, CellError> {
    p.check(CellKind::Gru)?;
    check_len("gru input", x, p.input_size())?;
    check_len("gru hidden", h, p.hidden_size())?;
    Ok(gru_forward(p, x, h).0.h)
}

/// `V × E` lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn init(vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        Embedding {
            table: Tensor::uniform(vocab, dim, 1.0, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn lookup(&self, id: u32) -> Result<&[f64], CellError> {
        let size = self.vocab_size();
        if id as usize >= size {
            return Err(CellError::IdOutOfRange { id, size });
        }
        Ok(self.table.row(id as usize))
    }

    pub(crate) fn accumulate(&mut self, id: u32, grad: &[f64]) {
        for (a, b) in self.table.row_mut(id as usize).iter_mut().zip(grad) {
            *a += b;
        }
    }
}

/// One layer: a forward cell and, for bidirectional layers, a second cell
/// that reads the sequence back to front. Outputs are `[forward; backward]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub forward: Cell,
    pub backward: Option<Cell>,
}

impl Layer {
    pub fn output_size(&self) -> usize {
        self.forward.hidden_size() * if self.backward.is_some() { 2 } else { 1 }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward.is_some()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerTrace {
    fwd: Vec<StepCache>,
    /// caches in processing order: entry k covers position T-1-k
    bwd: Option<Vec<StepCache>>,
}

#[derive(Clone, Debug)]
pub(crate) struct StackTrace {
    layers: Vec<LayerTrace>,
    /// top-layer outputs, one per position
    pub outputs: Vec<Vec<f64>>,
    /// final forward-direction state of every layer
    #[cfg_attr(not(test), allow(dead_code))]
    pub final_states: Vec<CellState>,
}

/// Ordered recurrent layers; layer `i` consumes the output of layer `i-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
}

impl LayerStack {
    pub fn init(
        kind: CellKind,
        input_size: usize,
        hidden: usize,
        layers: usize,
        bidirectional: bool,
        forget_bias: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut width = input_size;
        for _ in 0..layers {
            let forward = Cell::init(kind, width, hidden, forget_bias, rng);
            let backward = bidirectional.then(|| Cell::init(kind, width, hidden, forget_bias, rng));
            let layer = Layer { forward, backward };
            width = layer.output_size();
            out.push(layer);
        }
        LayerStack { layers: out }
    }

    /// Validates widths and kinds of hand-assembled layers.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, CellError> {
        if layers.is_empty() {
            return Err(CellError::Inconsistent("no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.forward.params().check(layer.forward.kind())?;
            if let Some(b) = &layer.backward {
                b.params().check(b.kind())?;
                if b.input_size() != layer.forward.input_size()
                    || b.hidden_size() != layer.forward.hidden_size()
                {
                    return Err(CellError::Inconsistent(format!(
                        "layer {i}: backward cell shape differs from forward cell"
                    )));
                }
            }
            if i > 0 && layer.forward.input_size() != layers[i - 1].output_size() {
                return Err(CellError::Inconsistent(format!(
                    "layer {i} expects input width {} but layer {} emits {}",
                    layer.forward.input_size(),
                    i - 1,
                    layers[i - 1].output_size()
                )));
            }
        }
        Ok(LayerStack { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].forward.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_size)
    }

    pub fn is_unidirectional(&self) -> bool {
        self.layers.iter().all(|l| l.backward.is_none())
    }

    pub fn zero_states(&self) -> Vec<CellState> {
        self.layers.iter().map(|l| l.forward.zero_state()).collect()
    }

    /// Runs the whole stack and returns every layer's output sequence.
    pub fn run_sequence(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>, CellError> {
        self.check_inputs(inputs)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut current: Vec<Vec<f64>> = inputs.to_vec();
        for layer in &self.layers {
            let (out, _, _) = run_layer(layer, &current, None);
            per_layer.push(out.clone());
            current = out;
        }
        Ok(per_layer)
    }

    /// One step of a unidirectional stack; returns the top output and the
    /// new per-layer states.
    pub fn step(
        &self,
        x: &[f64],
        states: &[CellState],
    ) -> Result<(Vec<f64>, Vec<CellState>), CellError> {
        if !self.is_unidirectional() {
            return Err(CellError::NotUnidirectional);
        }
        if states.len() != self.layers.len() {
            return Err(CellError::Dimension {
                what: "layer states",
                expected: self.layers.len(),
                got: states.len(),
            });
        }
        check_len("stack input", x, self.input_size())?;
        let mut input = x.to_vec();
        let mut next = Vec::with_capacity(states.len());
        for (layer, state) in self.layers.iter().zip(states) {
            let s = layer.forward.step(&input, state)?;
            input = s.h.clone();
            next.push(s);
        }
        Ok((input, next))
    }

    fn check_inputs(&self, inputs: &[Vec<f64>]) -> Result<(), CellError> {
        if inputs.is_empty() {
            return Err(CellError::EmptySequence);
        }
        for x in inputs {
            check_len("sequence input", x, self.input_size())?;
        }
        Ok(())
    }

    /// Forward pass keeping everything needed for [`Self::backprop_trace`].
    /// `init` seeds the forward direction of each layer.
    pub(crate) fn trace(&self, inputs: &[Vec<f64>], init: Option<&[CellState]>) -> StackTrace {
        let mut current: Vec<Vec<f64>> = inputs.to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut final_states = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, trace, last) = run_layer(layer, &current, init.map(|s| &s[i]));
            layers.push(trace);
            final_states.push(last);
            current = out;
        }
        StackTrace {
            layers,
            outputs: current,
            final_states,
        }
    }

    /// Backpropagates `d_top` (one gradient per top-layer output) through
    /// the trace. Parameter gradients accumulate into `grads`; returns the
    /// input gradients and the gradients of each layer's initial state.
    pub(crate) fn backprop_trace(
        &self,
        trace: &StackTrace,
        d_top: &[Vec<f64>],
        grads: &mut LayerStack,
    ) -> (Vec<Vec<f64>>, Vec<CellState>) {
        let steps = d_top.len();
        let mut d_out: Vec<Vec<f64>> = d_top.to_vec();
        let mut d_init = vec![
            CellState {
                h: vec![],
                c: vec![]
            };
            self.layers.len()
        ];
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let lt = &trace.layers[li];
            let g = &mut grads.layers[li];
            let hs = layer.forward.hidden_size();
            let in_size = layer.forward.input_size();
            let mut d_in = vec![vec![0.0; in_size]; steps];

            let mut carry = layer.forward.zero_state();
            for t in (0..steps).rev() {
                let dh: Vec<f64> = d_out[t][..hs]
                    .iter()
                    .zip(&carry.h)
                    .map(|(a, b)| a + b)
                    .collect();
                carry =
                    layer
                        .forward
                        .backward(&lt.fwd[t], &dh, &carry.c, &mut g.forward, &mut d_in[t]);
            }
            d_init[li] = carry;

            if let (Some(cell), Some(caches), Some(gcell)) =
                (&layer.backward, &lt.bwd, g.backward.as_mut())
            {
                let mut carry = cell.zero_state();
                for k in (0..steps).rev() {
                    let pos = steps - 1 - k;
                    let dh: Vec<f64> = d_out[pos][hs..]
                        .iter()
                        .zip(&carry.h)
                        .map(|(a, b)| a + b)
                        .collect();
                    carry = cell.backward(&caches[k], &dh, &carry.c, gcell, &mut d_in[pos]);
                }
            }
            d_out = d_in;
        }
        (d_out, d_init)
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward.push_named(&format!("{prefix}.l{i}.fwd"), out);
            if let Some(b) = &layer.backward {
                b.push_named(&format!("{prefix}.l{i}.bwd"), out);
            }
        }
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for layer in &mut self.layers {
            layer.forward.push_mut(out);
            if let Some(b) = &mut layer.backward {
                b.push_mut(out);
            }
        }
    }

    pub(crate) fn named_into<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.push_named(prefix, out);
    }

    pub(crate) fn mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.push_mut(out);
    }
}

impl ParamTensors for LayerStack {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.push_named("stack", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

fn run_layer(
    layer: &Layer,
    inputs: &[Vec<f64>],
    init: Option<&CellState>,
) -> (Vec<Vec<f64>>, LayerTrace, CellState) {
    let steps = inputs.len();
    let hs = layer.forward.hidden_size();
    let width = layer.output_size();
    let mut outputs = vec![vec![0.0; width]; steps];
    let mut state = init.cloned().unwrap_or_else(|| layer.forward.zero_state());
    let mut fwd = Vec::with_capacity(steps);
    for (t, x) in inputs.iter().enumerate() {
        let (s, cache) = layer.forward.forward(x, &state);
        outputs[t][..hs].copy_from_slice(&s.h);
        fwd.push(cache);
        state = s;
    }
    let bwd = layer.backward.as_ref().map(|cell| {
        let mut st = cell.zero_state();
        let mut caches = Vec::with_capacity(steps);
        for pos in (0..steps).rev() {
            let (s, cache) = cell.forward(&inputs[pos], &st);
            outputs[pos][hs..].copy_from_slice(&s.h);
            caches.push(cache);
            st = s;
        }
        caches
    });
    (outputs, LayerTrace { fwd, bwd }, state)
}

/// Gradients of `Σ_t upstream[t] · output[t]` (top layer) with respect to
/// every stack parameter and every input vector.
pub fn backprop_sequence(
    stack: &LayerStack,
    inputs: &[Vec<f64>],
    upstream: &[Vec<f64>],
) -> Result<(LayerStack, Vec<Vec<f64>>), CellError> {
    stack.check_inputs(inputs)?;
    if upstream.len() != inputs.len() {
        return Err(CellError::Dimension {
            what: "upstream gradient steps",
            expected: inputs.len(),
            got: upstream.len(),
        });
    }
    for u in upstream {
        check_len("upstream gradient", u, stack.output_size())?;
    }
    let trace = stack.trace(inputs, None);
    let mut grads = crate::tensor::zeros_like(stack);
    let (d_inputs, _) = stack.backprop_trace(&trace, upstream, &mut grads);
    Ok((grads, d_inputs))
}
