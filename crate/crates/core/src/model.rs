//! Bi-LSTM window encoder, shared attentive LSTM decoder, output projection
//! and pointer-generator gate, with exact reverse-mode gradients.
//!
//! Shapes, with `E` the embedding size, `H` the encoder hidden size per
//! direction and `D = 2H` the decoder hidden size:
//!
//! | tensor        | shape       |
//! |---------------|-------------|
//! | encoder LSTMs | `4H x E`, `4H x H`, `4H` |
//! | decoder LSTM  | `4D x E`, `4D x D`, `4D` |
//! | `out.w`       | `E x 2D`    |
//! | `out.b`       | `E`         |
//! | gate vectors  | `D`, `D`, `E`, scalar |
//!
//! The output projection maps `tanh([c_t; s_t])` into embedding space so that
//! generation logits are dot products with the embedding rows.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewMut1, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EmbeddingTable, Vocabulary};
use crate::windowing::{CorpusStats, WindowPlan, WindowSpec};
use crate::{Error, Mode, Result};

const INIT_SCALE: f64 = 0.1;

/// Architecture and windowing hyper-parameters stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub window: WindowSpec,
    /// Maximum input length `T_x`; only enforced (by truncation) in STAN mode.
    pub max_input: usize,
    /// Maximum summary length `T_y` in decoder steps.
    pub max_summary: usize,
    pub k: f64,
    pub d: f64,
    pub stats: Option<CorpusStats>,
    /// Encoder hidden size per direction; the decoder uses twice this.
    pub hidden: usize,
    /// Fine-tune content-word embeddings.
    pub train_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Dwm,
            window: WindowSpec {
                window: 400,
                stride: 380,
            },
            max_input: 1160,
            max_summary: 125,
            k: 0.8,
            d: 1.2,
            stats: None,
            hidden: 256,
            train_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.hidden == 0 || self.max_summary == 0 || self.max_input == 0 {
            return Err(Error::Config("hidden, max_summary and max_input must be positive".into()));
        }
        if self.mode == Mode::Stan && (self.window.window != self.max_input || self.window.stride != self.max_input) {
            return Err(Error::Config(format!(
                "stan mode needs a single window of T_x tokens (window={} stride={} T_x={})",
                self.window.window, self.window.stride, self.max_input
            )));
        }
        if self.mode == Mode::Swm && !(self.k.is_finite() && self.d.is_finite()) {
            return Err(Error::Config("swm mode needs finite k and d".into()));
        }
        Ok(())
    }

    /// The window layout actually used for `mode` (STAN: one window of `T_x`).
    pub fn effective_window(&self) -> WindowSpec {
        match self.mode {
            Mode::Stan => WindowSpec {
                window: self.max_input,
                stride: self.max_input,
            },
            _ => self.window,
        }
    }
}

/// Weights of one LSTM layer; gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Array2::zeros((4 * hidden, input)),
            w_h: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }
}

/// Every trainable tensor except the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub enc_fwd: LstmParams,
    pub enc_bwd: LstmParams,
    pub dec: LstmParams,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    pub gate_ctx: Array1<f64>,
    pub gate_state: Array1<f64>,
    pub gate_input: Array1<f64>,
    pub gate_bias: f64,
}

pub const WEIGHT_NAMES: [&str; 16] = [
    "enc_fwd.w_x",
    "enc_fwd.w_h",
    "enc_fwd.b",
    "enc_bwd.w_x",
    "enc_bwd.w_h",
    "enc_bwd.b",
    "dec.w_x",
    "dec.w_h",
    "dec.b",
    "out.w",
    "out.b",
    "gate.ctx",
    "gate.state",
    "gate.input",
    "gate.bias",
    "embeddings",
];

impl Weights {
    pub fn zeros(emb: usize, hidden: usize) -> Self {
        let dec = 2 * hidden;
        Weights {
            enc_fwd: LstmParams::zeros(emb, hidden),
            enc_bwd: LstmParams::zeros(emb, hidden),
            dec: LstmParams::zeros(emb, dec),
            out_w: Array2::zeros((emb, 2 * dec)),
            out_b: Array1::zeros(emb),
            gate_ctx: Array1::zeros(dec),
            gate_state: Array1::zeros(dec),
            gate_input: Array1::zeros(emb),
            gate_bias: 0.0,
        }
    }

    pub fn random(emb: usize, hidden: usize, seed: u64) -> Self {
        let mut w = Self::zeros(emb, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in w.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-INIT_SCALE..INIT_SCALE));
        }
        w.gate_bias = 0.0;
        w
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_w.nrows(), self.enc_fwd.hidden())
    }

    /// Named flat views of every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let w = self;
        fn flat1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn flat2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        vec![
            (WEIGHT_NAMES[0], flat2(&w.enc_fwd.w_x)),
            (WEIGHT_NAMES[1], flat2(&w.enc_fwd.w_h)),
            (WEIGHT_NAMES[2], flat1(&w.enc_fwd.b)),
            (WEIGHT_NAMES[3], flat2(&w.enc_bwd.w_x)),
            (WEIGHT_NAMES[4], flat2(&w.enc_bwd.w_h)),
            (WEIGHT_NAMES[5], flat1(&w.enc_bwd.b)),
            (WEIGHT_NAMES[6], flat2(&w.dec.w_x)),
            (WEIGHT_NAMES[7], flat2(&w.dec.w_h)),
            (WEIGHT_NAMES[8], flat1(&w.dec.b)),
            (WEIGHT_NAMES[9], flat2(&w.out_w)),
            (WEIGHT_NAMES[10], flat1(&w.out_b)),
            (WEIGHT_NAMES[11], flat1(&w.gate_ctx)),
            (WEIGHT_NAMES[12], flat1(&w.gate_state)),
            (WEIGHT_NAMES[13], flat1(&w.gate_input)),
            (WEIGHT_NAMES[14], std::slice::from_ref(&w.gate_bias)),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let w = self;
        vec![
            (WEIGHT_NAMES[0], w.enc_fwd.w_x.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[1], w.enc_fwd.w_h.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[2], w.enc_fwd.b.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[3], w.enc_bwd.w_x.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[4], w.enc_bwd.w_h.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[5], w.enc_bwd.b.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[6], w.dec.w_x.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[7], w.dec.w_h.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[8], w.dec.b.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[9], w.out_w.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[10], w.out_b.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[11], w.gate_ctx.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[12], w.gate_state.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[13], w.gate_input.as_slice_mut().expect("standard layout")),
            (WEIGHT_NAMES[14], std::slice::from_mut(&mut w.gate_bias)),
        ]
    }

    /// Tensor shapes in the order of [`Weights::tensors`].
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let w = self;
        let d2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
        let d1 = |a: &Array1<f64>| vec![a.len()];
        vec![
            (WEIGHT_NAMES[0], d2(&w.enc_fwd.w_x)),
            (WEIGHT_NAMES[1], d2(&w.enc_fwd.w_h)),
            (WEIGHT_NAMES[2], d1(&w.enc_fwd.b)),
            (WEIGHT_NAMES[3], d2(&w.enc_bwd.w_x)),
            (WEIGHT_NAMES[4], d2(&w.enc_bwd.w_h)),
            (WEIGHT_NAMES[5], d1(&w.enc_bwd.b)),
            (WEIGHT_NAMES[6], d2(&w.dec.w_x)),
            (WEIGHT_NAMES[7], d2(&w.dec.w_h)),
            (WEIGHT_NAMES[8], d1(&w.dec.b)),
            (WEIGHT_NAMES[9], d2(&w.out_w)),
            (WEIGHT_NAMES[10], d1(&w.out_b)),
            (WEIGHT_NAMES[11], d1(&w.gate_ctx)),
            (WEIGHT_NAMES[12], d1(&w.gate_state)),
            (WEIGHT_NAMES[13], d1(&w.gate_input)),
            (WEIGHT_NAMES[14], vec![1]),
        ]
    }
}

/// Embedding rows updated by training. `<eos>` and `-->` are always trainable;
/// every other row except `<pad>` only when embeddings are fine-tuned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableRows {
    rows: Vec<usize>,
    slots: HashMap<usize, usize>,
}

impl TrainableRows {
    pub fn new(vocab: &Vocabulary, all: bool) -> Self {
        let rows: Vec<usize> = if all {
            (0..vocab.len()).filter(|&r| r != vocab.pad()).collect()
        } else {
            vec![vocab.eos(), vocab.shift()]
        };
        let slots = rows.iter().enumerate().map(|(s, &r)| (r, s)).collect();
        TrainableRows { rows, slots }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn slot(&self, row: usize) -> Option<usize> {
        self.slots.get(&row).copied()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// All model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Weights,
    pub embeddings: EmbeddingTable,
}

/// Gradients of the loss; embedding rows follow [`TrainableRows`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Weights,
    pub embeddings: Array2<f64>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Gradients {
            weights: model.params.weights.zeros_like(),
            embeddings: Array2::zeros((model.trainable.len(), model.emb_dim())),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((_, a), (_, b)) in self.weights.tensors_mut().into_iter().zip(other.weights.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.embeddings += &other.embeddings;
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.weights.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
        self.embeddings *= factor;
    }

    pub fn norm(&self) -> f64 {
        let w: f64 = self
            .weights
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum();
        (w + self.embeddings.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
            && self.embeddings.iter().all(|x| x.is_finite())
    }
}

/// Source document ids with its extended (copy) vocabulary: in-vocabulary
/// words keep their id, out-of-vocabulary words get `|V| + k` in order of
/// first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceText {
    /// Ids fed to the encoder (`<unk>` for out-of-vocabulary words).
    pub input_ids: Vec<usize>,
    /// Extended-vocabulary ids used by the copy distribution.
    pub extended_ids: Vec<usize>,
    pub oov: Vec<String>,
    vocab_len: usize,
}

impl SourceText {
    pub fn new(doc: &Document, vocab: &Vocabulary) -> Self {
        let mut oov: Vec<String> = Vec::new();
        let mut oov_index: HashMap<&str, usize> = HashMap::new();
        let mut input_ids = Vec::with_capacity(doc.len());
        let mut extended_ids = Vec::with_capacity(doc.len());
        for tok in &doc.tokens {
            match vocab.id(tok) {
                Some(id) => {
                    input_ids.push(id);
                    extended_ids.push(id);
                }
                None => {
                    let k = *oov_index.entry(tok.as_str()).or_insert_with(|| {
                        oov.push(tok.clone());
                        oov.len() - 1
                    });
                    input_ids.push(vocab.unk());
                    extended_ids.push(vocab.len() + k);
                }
            }
        }
        SourceText {
            input_ids,
            extended_ids,
            oov,
            vocab_len: vocab.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn extended_len(&self) -> usize {
        self.vocab_len + self.oov.len()
    }

    /// Extended id of a target word: vocabulary id, copy id, or `<unk>`.
    pub fn target_id(&self, word: &str, vocab: &Vocabulary) -> usize {
        if let Some(id) = vocab.id(word) {
            return id;
        }
        match self.oov.iter().position(|w| w == word) {
            Some(k) => self.vocab_len + k,
            None => vocab.unk(),
        }
    }

    pub fn word<'a>(&'a self, id: usize, vocab: &'a Vocabulary) -> &'a str {
        if id < self.vocab_len {
            vocab.word(id)
        } else {
            &self.oov[id - self.vocab_len]
        }
    }
}

/// Bi-LSTM encoding of one window of exactly `T_w` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedWindow {
    /// `T_w x 2H`; rows of pad positions are zero.
    pub states: Array2<f64>,
    pub mask: Vec<bool>,
    /// Extended id per position (meaningless where masked).
    pub extended_ids: Vec<usize>,
    pub final_fwd: Array1<f64>,
    pub final_bwd: Array1<f64>,
}

impl EncodedWindow {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Recurrent decoder state carried across window shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Array1<f64>,
    pub cell: Array1<f64>,
    /// 0-based index of the attended window.
    pub window: usize,
    pub step: usize,
}

impl DecoderState {
    /// Moves to the next window, clamped at `num_windows - 1`; the recurrent
    /// state is untouched.
    pub fn shift_window(&mut self, num_windows: usize) {
        if self.window + 1 < num_windows {
            self.window += 1;
        }
    }
}

/// Everything one decoder step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub context: Array1<f64>,
    /// Attention over the `T_w` window positions (zero where masked).
    pub attention: Array1<f64>,
    pub output: Array1<f64>,
    /// Generation distribution over the vocabulary (`<pad>`, `<s>` get 0).
    pub p_vocab: Array1<f64>,
    pub p_gen: f64,
    /// Distribution over the extended vocabulary.
    pub p_extended: Array1<f64>,
}

// ---------------------------------------------------------------------------
// Primitive operations

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// Softmax over `logits` restricted to positions where `keep` is true.
fn masked_softmax(logits: &Array1<f64>, keep: impl Fn(usize) -> bool) -> Option<Array1<f64>> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out = Array1::zeros(logits.len());
    let mut sum = 0.0;
    for (i, (o, &l)) in out.iter_mut().zip(logits.iter()).enumerate() {
        if keep(i) {
            *o = (l - max).exp();
            sum += *o;
        }
    }
    out /= sum;
    Some(out)
}

#[derive(Debug, Clone)]
struct LstmCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    gates: Array1<f64>,
    tanh_c: Array1<f64>,
}

fn lstm_step(
    p: &LstmParams,
    x: ArrayView1<f64>,
    h_prev: &Array1<f64>,
    c_prev: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>, LstmCache) {
    let hd = p.hidden();
    let mut z = p.w_x.dot(&x) + p.w_h.dot(h_prev) + &p.b;
    z.slice_mut(s![..2 * hd]).mapv_inplace(sigmoid);
    z.slice_mut(s![2 * hd..3 * hd]).mapv_inplace(f64::tanh);
    z.slice_mut(s![3 * hd..]).mapv_inplace(sigmoid);
    let (i, f, g, o) = (
        z.slice(s![..hd]),
        z.slice(s![hd..2 * hd]),
        z.slice(s![2 * hd..3 * hd]),
        z.slice(s![3 * hd..]),
    );
    let c = &f * c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    let cache = LstmCache {
        x: x.to_owned(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        gates: z,
        tanh_c,
    };
    (h, c, cache)
}

/// Backpropagates one LSTM step. Returns `(dx, dh_prev, dc_prev)`.
fn lstm_step_backward(
    p: &LstmParams,
    cache: &LstmCache,
    dh: &Array1<f64>,
    dc_next: &Array1<f64>,
    grad: &mut LstmParams,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let hd = p.hidden();
    let z = &cache.gates;
    let (i, f, g, o) = (
        z.slice(s![..hd]),
        z.slice(s![hd..2 * hd]),
        z.slice(s![2 * hd..3 * hd]),
        z.slice(s![3 * hd..]),
    );
    let dc = dc_next + &(dh * &o * &cache.tanh_c.mapv(|t| 1.0 - t * t));
    let mut dz = Array1::zeros(4 * hd);
    Zip::from(dz.slice_mut(s![..hd]))
        .and(&dc)
        .and(&g)
        .and(&i)
        .for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
    Zip::from(dz.slice_mut(s![hd..2 * hd]))
        .and(&dc)
        .and(&cache.c_prev)
        .and(&f)
        .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
    Zip::from(dz.slice_mut(s![2 * hd..3 * hd]))
        .and(&dc)
        .and(&i)
        .and(&g)
        .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
    Zip::from(dz.slice_mut(s![3 * hd..]))
        .and(dh)
        .and(&cache.tanh_c)
        .and(&o)
        .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (1.0 - o));
    add_outer(&mut grad.w_x, dz.view(), cache.x.view());
    add_outer(&mut grad.w_h, dz.view(), cache.h_prev.view());
    grad.b += &dz;
    let dx = p.w_x.t().dot(&dz);
    let dh_prev = p.w_h.t().dot(&dz);
    let dc_prev = &dc * &f;
    (dx, dh_prev, dc_prev)
}

/// Dot-product attention of `query` over the unmasked rows of `window`.
pub fn attend(query: &Array1<f64>, window: &EncodedWindow) -> Result<(Array1<f64>, Array1<f64>)> {
    if query.len() != window.states.ncols() {
        return Err(Error::Shape(format!(
            "attention query has {} dims, window states have {}",
            query.len(),
            window.states.ncols()
        )));
    }
    let scores = window.states.dot(query);
    let alpha = masked_softmax(&scores, |j| window.mask[j]).ok_or(Error::EmptyAttention)?;
    let context = window.states.t().dot(&alpha);
    Ok((context, alpha))
}

/// `sigmoid(w_c . c + w_s . s + w_x . x + b_ptr)`.
pub fn pg_gate(context: &Array1<f64>, state: &Array1<f64>, input: ArrayView1<f64>, weights: &Weights) -> f64 {
    sigmoid(gate_logit(context, state, input, weights))
}

fn gate_logit(context: &Array1<f64>, state: &Array1<f64>, input: ArrayView1<f64>, weights: &Weights) -> f64 {
    weights.gate_ctx.dot(context) + weights.gate_state.dot(state) + weights.gate_input.dot(&input) + weights.gate_bias
}

/// `p_gen * P_V(x) + (1 - p_gen) * sum of attention on positions holding x`,
/// over an extended vocabulary of `extended_len` entries.
pub fn extended_distribution(
    p_vocab: &Array1<f64>,
    p_gen: f64,
    attention: &Array1<f64>,
    window: &EncodedWindow,
    extended_len: usize,
) -> Array1<f64> {
    let mut out = Array1::zeros(extended_len);
    out.slice_mut(s![..p_vocab.len()]).scaled_add(p_gen, p_vocab);
    for (j, &a) in attention.iter().enumerate() {
        if window.mask[j] {
            out[window.extended_ids[j]] += (1.0 - p_gen) * a;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model

/// A summarization model: configuration, vocabulary and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Arc<Vocabulary>,
    pub params: Params,
    trainable: TrainableRows,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    input_ids: Vec<usize>,
    fwd: Vec<LstmCache>,
    bwd: Vec<LstmCache>,
}

#[derive(Debug, Clone)]
struct StepCache {
    window: usize,
    input_id: usize,
    lstm: LstmCache,
    hidden: Array1<f64>,
    attention: Array1<f64>,
    context: Array1<f64>,
    activated: Array1<f64>,
    output: Array1<f64>,
    p_vocab: Array1<f64>,
    p_gen: f64,
    copy_mass: f64,
    target: usize,
    prob: f64,
}

/// One teacher-forced training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub source: SourceText,
    pub plan: WindowPlan,
    /// Extended ids of the target tokens, ending with `</s>`.
    pub targets: Vec<usize>,
    /// 0-based window attended at each step.
    pub windows: Vec<usize>,
}

impl TeacherForced {
    /// Decoder inputs: `<s>` followed by the targets shifted right.
    pub fn inputs(&self, vocab: &Vocabulary) -> Vec<usize> {
        std::iter::once(vocab.start())
            .chain(self.targets[..self.targets.len().saturating_sub(1)].iter().copied())
            .collect()
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        let weights = Weights::random(embeddings.dim(), config.hidden, seed);
        Self::from_parts(config, vocab, Params { weights, embeddings })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: Params) -> Result<Self> {
        config.validate()?;
        if params.embeddings.rows() != vocab.len() {
            return Err(Error::Shape(format!(
                "embedding table has {} rows for a vocabulary of {}",
                params.embeddings.rows(),
                vocab.len()
            )));
        }
        let expected = Weights::zeros(params.embeddings.dim(), config.hidden).shapes();
        if params.weights.shapes() != expected {
            return Err(Error::Shape("weight shapes do not match the configuration".into()));
        }
        let trainable = TrainableRows::new(&vocab, config.train_embeddings);
        Ok(Model {
            config,
            vocab: Arc::new(vocab),
            params,
            trainable,
        })
    }

    pub fn emb_dim(&self) -> usize {
        self.params.embeddings.dim()
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn trainable_rows(&self) -> &TrainableRows {
        &self.trainable
    }

    fn input_embedding(&self, id: usize) -> ArrayView1<'_, f64> {
        let row = if id < self.vocab.len() { id } else { self.vocab.unk() };
        self.params.embeddings.row(row)
    }

    /// Encodes window `index` of `plan` over `source`.
    pub fn encode_window(&self, source: &SourceText, plan: &WindowPlan, index: usize) -> EncodedWindow {
        self.encode_window_cached(source, plan, index).0
    }

    fn encode_window_cached(&self, source: &SourceText, plan: &WindowPlan, index: usize) -> (EncodedWindow, EncoderCache) {
        let range = plan.range(index);
        let ids = &source.input_ids[range.clone()];
        let tw = plan.spec.window;
        let hd = self.hidden();
        let w = &self.params.weights;

        let mut states = Array2::zeros((tw, 2 * hd));
        let mut fwd = Vec::with_capacity(ids.len());
        let (mut h, mut c) = (Array1::zeros(hd), Array1::zeros(hd));
        for (j, &id) in ids.iter().enumerate() {
            let (h2, c2, cache) = lstm_step(&w.enc_fwd, self.input_embedding(id), &h, &c);
            states.slice_mut(s![j, ..hd]).assign(&h2);
            h = h2;
            c = c2;
            fwd.push(cache);
        }
        let final_fwd = h;

        let mut bwd = Vec::with_capacity(ids.len());
        let (mut h, mut c) = (Array1::zeros(hd), Array1::zeros(hd));
        for (j, &id) in ids.iter().enumerate().rev() {
            let (h2, c2, cache) = lstm_step(&w.enc_bwd, self.input_embedding(id), &h, &c);
            states.slice_mut(s![j, hd..]).assign(&h2);
            h = h2;
            c = c2;
            bwd.push(cache);
        }
        let final_bwd = h;

        let mut mask = vec![false; tw];
        mask[..ids.len()].iter_mut().for_each(|m| *m = true);
        let mut extended_ids = vec![self.vocab.pad(); tw];
        extended_ids[..ids.len()].copy_from_slice(&source.extended_ids[range]);
        (
            EncodedWindow {
                states,
                mask,
                extended_ids,
                final_fwd,
                final_bwd,
            },
            EncoderCache {
                input_ids: ids.to_vec(),
                fwd,
                bwd,
            },
        )
    }

    /// `s_0 = [fwd final ; bwd final]` of the first window, zero cell state.
    pub fn init_decoder_state(&self, first: &EncodedWindow) -> DecoderState {
        let hd = self.hidden();
        let mut hidden = Array1::zeros(2 * hd);
        hidden.slice_mut(s![..hd]).assign(&first.final_fwd);
        hidden.slice_mut(s![hd..]).assign(&first.final_bwd);
        DecoderState {
            hidden,
            cell: Array1::zeros(2 * hd),
            window: 0,
            step: 0,
        }
    }

    /// Advances the decoder one step on `input_id` while attending `window`.
    pub fn decode_step(
        &self,
        state: &DecoderState,
        input_id: usize,
        window: &EncodedWindow,
        extended_len: usize,
    ) -> Result<(StepOutput, DecoderState)> {
        let (out, next, _) = self.decode_step_cached(state, input_id, window, extended_len)?;
        Ok((out, next))
    }

    fn decode_step_cached(
        &self,
        state: &DecoderState,
        input_id: usize,
        window: &EncodedWindow,
        extended_len: usize,
    ) -> Result<(StepOutput, DecoderState, LstmCache)> {
        let w = &self.params.weights;
        let x = self.input_embedding(input_id);
        let (hidden, cell, lstm) = lstm_step(&w.dec, x, &state.hidden, &state.cell);
        let (context, attention) = attend(&hidden, window)?;
        let d = hidden.len();
        let mut activated = Array1::zeros(2 * d);
        activated.slice_mut(s![..d]).assign(&context);
        activated.slice_mut(s![d..]).assign(&hidden);
        activated.mapv_inplace(f64::tanh);
        let output = w.out_w.dot(&activated) + &w.out_b;
        let logits = self.params.embeddings.matrix.dot(&output);
        let vocab = &self.vocab;
        let p_vocab = masked_softmax(&logits, |v| vocab.is_output(v)).ok_or(Error::EmptyAttention)?;
        if !p_vocab.iter().all(|p| p.is_finite()) || !hidden.iter().all(|h| h.is_finite()) {
            return Err(Error::NonFinite("decoder step".into()));
        }
        let p_gen = pg_gate(&context, &hidden, x, w);
        let p_extended = extended_distribution(&p_vocab, p_gen, &attention, window, extended_len);
        let next = DecoderState {
            hidden: hidden.clone(),
            cell,
            window: state.window,
            step: state.step + 1,
        };
        Ok((
            StepOutput {
                context,
                attention,
                output,
                p_vocab,
                p_gen,
                p_extended,
            },
            next,
            lstm,
        ))
    }

    /// Mean negative log-likelihood of a teacher-forced sequence; when `grads`
    /// is given, the exact gradient is accumulated into it.
    pub fn sequence_loss(&self, example: &TeacherForced, grads: Option<&mut Gradients>) -> Result<f64> {
        let steps = example.targets.len();
        if steps == 0 || example.windows.len() != steps {
            return Err(Error::Shape("target and window traces must be non-empty and aligned".into()));
        }
        let used = example.windows.iter().copied().max().unwrap_or(0) + 1;
        let encoded: Vec<(EncodedWindow, EncoderCache)> = (0..used)
            .map(|i| self.encode_window_cached(&example.source, &example.plan, i))
            .collect();
        let ext_len = example.source.extended_len();
        let inputs = example.inputs(&self.vocab);

        let mut state = self.init_decoder_state(&encoded[0].0);
        let mut caches = Vec::with_capacity(steps);
        let mut loss = 0.0;
        for t in 0..steps {
            let win = example.windows[t];
            state.window = win;
            let (out, next, lstm) = self.decode_step_cached(&state, inputs[t], &encoded[win].0, ext_len)?;
            let target = example.targets[t];
            let prob = out.p_extended[target];
            loss -= prob.max(crate::training::PROB_FLOOR).ln();
            let copy_mass = (0..out.attention.len())
                .filter(|&j| encoded[win].0.mask[j] && encoded[win].0.extended_ids[j] == target)
                .map(|j| out.attention[j])
                .sum();
            if grads.is_some() {
                let d = next.hidden.len();
                let mut activated = Array1::zeros(2 * d);
                activated.slice_mut(s![..d]).assign(&out.context);
                activated.slice_mut(s![d..]).assign(&next.hidden);
                activated.mapv_inplace(f64::tanh);
                caches.push(StepCache {
                    window: win,
                    input_id: inputs[t],
                    lstm,
                    hidden: next.hidden.clone(),
                    attention: out.attention,
                    context: out.context,
                    activated,
                    output: out.output,
                    p_vocab: out.p_vocab,
                    p_gen: out.p_gen,
                    copy_mass,
                    target,
                    prob,
                });
            }
            state = next;
        }
        let loss = loss / steps as f64;

        if let Some(grads) = grads {
            self.backward(&encoded, &caches, steps, grads);
            if !grads.is_finite() {
                return Err(Error::NonFinite("gradients".into()));
            }
        }
        Ok(loss)
    }

    fn add_embedding_grad(&self, grads: &mut Gradients, id: usize, dx: ArrayView1<f64>) {
        let row = if id < self.vocab.len() { id } else { self.vocab.unk() };
        if let Some(slot) = self.trainable.slot(row) {
            grads.embeddings.row_mut(slot).scaled_add(1.0, &dx);
        }
    }

    fn backward(&self, encoded: &[(EncodedWindow, EncoderCache)], caches: &[StepCache], steps: usize, grads: &mut Gradients) {
        let w = &self.params.weights;
        let emb = &self.params.embeddings.matrix;
        let hd = self.hidden();
        let d = 2 * hd;
        let scale = 1.0 / steps as f64;

        let mut d_states: Vec<Array2<f64>> = encoded.iter().map(|(e, _)| Array2::zeros(e.states.dim())).collect();
        let mut dh_next: Array1<f64> = Array1::zeros(d);
        let mut dc_next: Array1<f64> = Array1::zeros(d);

        for cache in caches.iter().rev() {
            let window = &encoded[cache.window].0;
            let in_vocab = cache.target < self.vocab.len();
            let p_v_target = if in_vocab { cache.p_vocab[cache.target] } else { 0.0 };
            let dprob = if cache.prob > crate::training::PROB_FLOOR {
                -scale / cache.prob
            } else {
                0.0
            };

            // gate
            let dgate = dprob * (p_v_target - cache.copy_mass) * cache.p_gen * (1.0 - cache.p_gen);
            // generation logits
            let mut dh = Array1::zeros(d);
            let mut dctx = Array1::zeros(d);
            if in_vocab && p_v_target > 0.0 {
                let coef = dprob * cache.p_gen * p_v_target;
                let mut dlogits = cache.p_vocab.mapv(|p| -coef * p);
                dlogits[cache.target] += coef;
                let dout = emb.t().dot(&dlogits);
                for (slot, &row) in self.trainable.rows().iter().enumerate() {
                    if self.vocab.is_output(row) && dlogits[row] != 0.0 {
                        grads.embeddings.row_mut(slot).scaled_add(dlogits[row], &cache.output);
                    }
                }
                add_outer(&mut grads.weights.out_w, dout.view(), cache.activated.view());
                grads.weights.out_b += &dout;
                let mut dact = w.out_w.t().dot(&dout);
                Zip::from(&mut dact).and(&cache.activated).for_each(|g, &a| *g *= 1.0 - a * a);
                dctx += &dact.slice(s![..d]);
                dh += &dact.slice(s![d..]);
            }

            let x = self.input_embedding(cache.input_id);
            grads.weights.gate_ctx.scaled_add(dgate, &cache.context);
            grads.weights.gate_state.scaled_add(dgate, &cache.hidden);
            grads.weights.gate_input.scaled_add(dgate, &x);
            grads.weights.gate_bias += dgate;
            dctx.scaled_add(dgate, &w.gate_ctx);
            dh.scaled_add(dgate, &w.gate_state);
            let mut dx_gate = w.gate_input.clone() * dgate;

            // attention: context and copy mass
            let copy_coef = dprob * (1.0 - cache.p_gen);
            let mut dalpha = window.states.dot(&dctx);
            for (j, da) in dalpha.iter_mut().enumerate() {
                if window.mask[j] && window.extended_ids[j] == cache.target {
                    *da += copy_coef;
                }
            }
            let weighted: f64 = cache.attention.dot(&dalpha);
            let mut dscore = Array1::zeros(dalpha.len());
            for j in 0..dalpha.len() {
                if window.mask[j] {
                    dscore[j] = cache.attention[j] * (dalpha[j] - weighted);
                }
            }
            let d_win = &mut d_states[cache.window];
            add_outer(d_win, cache.attention.view(), dctx.view());
            add_outer(d_win, dscore.view(), cache.hidden.view());
            dh += &window.states.t().dot(&dscore);

            // decoder LSTM
            dh += &dh_next;
            let (dx, dh_prev, dc_prev) = lstm_step_backward(&w.dec, &cache.lstm, &dh, &dc_next, &mut grads.weights.dec);
            dx_gate += &dx;
            self.add_embedding_grad(grads, cache.input_id, dx_gate.view());
            dh_next = dh_prev;
            dc_next = dc_prev;
        }

        // s_0 feeds the first window's final states
        for (i, ((_, enc_cache), d_state)) in encoded.iter().zip(d_states.iter()).enumerate() {
            let (d_final_fwd, d_final_bwd) = if i == 0 {
                (dh_next.slice(s![..hd]).to_owned(), dh_next.slice(s![hd..]).to_owned())
            } else {
                (Array1::zeros(hd), Array1::zeros(hd))
            };
            self.encoder_backward(enc_cache, d_state, d_final_fwd, d_final_bwd, grads);
        }
    }

    fn encoder_backward(
        &self,
        cache: &EncoderCache,
        d_states: &Array2<f64>,
        d_final_fwd: Array1<f64>,
        d_final_bwd: Array1<f64>,
        grads: &mut Gradients,
    ) {
        let w = &self.params.weights;
        let hd = self.hidden();
        let n = cache.input_ids.len();

        let mut dh = d_final_fwd;
        let mut dc = Array1::zeros(hd);
        for j in (0..n).rev() {
            let dh_total = &dh + &d_states.slice(s![j, ..hd]);
            let (dx, dh_prev, dc_prev) = lstm_step_backward(&w.enc_fwd, &cache.fwd[j], &dh_total, &dc, &mut grads.weights.enc_fwd);
            self.add_embedding_grad(grads, cache.input_ids[j], dx.view());
            dh = dh_prev;
            dc = dc_prev;
        }

        // bwd[k] processed position n - 1 - k
        let mut dh = d_final_bwd;
        let mut dc = Array1::zeros(hd);
        for k in (0..n).rev() {
            let j = n - 1 - k;
            let dh_total = &dh + &d_states.slice(s![j, hd..]);
            let (dx, dh_prev, dc_prev) = lstm_step_backward(&w.enc_bwd, &cache.bwd[k], &dh_total, &dc, &mut grads.weights.enc_bwd);
            self.add_embedding_grad(grads, cache.input_ids[j], dx.view());
            dh = dh_prev;
            dc = dc_prev;
        }
    }

    /// Applies `update(param, grad_slot)` to every trainable embedding row.
    pub fn embedding_rows_mut(&mut self) -> impl Iterator<Item = (usize, ArrayViewMut1<'_, f64>)> {
        let rows = self.trainable.rows().to_vec();
        let matrix = &mut self.params.embeddings.matrix;
        matrix
            .rows_mut()
            .into_iter()
            .enumerate()
            .filter_map(move |(r, row)| rows.binary_search(&r).ok().map(|slot| (slot, row)))
    }
}
