//! Batch-level beam search and the window-transition policies used while
//! generating.
//!
//! Completed hypotheses keep occupying their beam and compete with the
//! expansions of incomplete ones by length-normalized log-probability, so a
//! longer unfinished hypothesis can displace a finished one.

use std::cell::OnceCell;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::model::{DecoderState, EncodedWindow, Model, SourceText};
use crate::windowing::{segment, static_plan, WindowPlan};
use crate::{Error, Mode, Result};

/// How the encoder window advances during decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WindowPolicy {
    /// Always the first window.
    Fixed,
    /// Forced shift once a window's budget of emitted tokens is used up.
    Static(Vec<usize>),
    /// Shift after every emitted `-->`.
    Dynamic { shift: usize },
}

/// Per-hypothesis window position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowCursor {
    pub window: usize,
    used: usize,
    num_windows: usize,
}

impl WindowCursor {
    pub fn new(num_windows: usize) -> Self {
        WindowCursor {
            window: 0,
            used: 0,
            num_windows: num_windows.max(1),
        }
    }

    /// Applies forced static shifts due before the next token is emitted.
    pub fn before_step(&mut self, policy: &WindowPolicy) {
        if let WindowPolicy::Static(budgets) = policy {
            while self.window + 1 < self.num_windows && self.used >= budgets.get(self.window).copied().unwrap_or(0) {
                self.window += 1;
                self.used = 0;
            }
        }
    }

    /// Records an emitted token.
    pub fn after_token(&mut self, token: usize, policy: &WindowPolicy) {
        match policy {
            WindowPolicy::Fixed => {}
            WindowPolicy::Static(_) => self.used += 1,
            WindowPolicy::Dynamic { shift } => {
                if token == *shift && self.window + 1 < self.num_windows {
                    self.window += 1;
                }
            }
        }
    }

    /// Window attended at each step of a teacher-forced target sequence.
    pub fn trace(num_windows: usize, policy: &WindowPolicy, tokens: &[usize]) -> Vec<usize> {
        let mut cursor = WindowCursor::new(num_windows);
        tokens
            .iter()
            .map(|&tok| {
                cursor.before_step(policy);
                let w = cursor.window;
                cursor.after_token(tok, policy);
                w
            })
            .collect()
    }
}

/// A step-wise scorer driving the beam search.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&self) -> Result<Self::State>;

    /// Distribution over output ids after feeding `input` while attending `window`.
    fn step(&self, state: &Self::State, input: usize, window: usize) -> Result<(Vec<f64>, Self::State)>;

    fn num_windows(&self) -> usize;
    fn start_id(&self) -> usize;
    fn eos_id(&self) -> usize;
}

/// A partial or completed output sequence.
#[derive(Debug, Clone)]
pub struct BeamHypothesis<S> {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub completed: bool,
    pub state: S,
    pub cursor: WindowCursor,
    /// 0-based window attended when each token was emitted.
    pub windows: Vec<usize>,
}

impl<S> BeamHypothesis<S> {
    pub fn score(&self) -> f64 {
        normalized_score(self.log_prob, self.tokens.len())
    }
}

/// Sum log-probability divided by token count (shift tokens and `</s>` count).
pub fn normalized_score(log_prob: f64, len: usize) -> f64 {
    if len == 0 {
        return 0.0;
    }
    log_prob / len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl SearchConfig {
    pub fn new(beam: usize, max_len: usize) -> Result<Self> {
        if beam == 0 || max_len == 0 {
            return Err(Error::Config("beam size and T_y must be at least 1".into()));
        }
        Ok(SearchConfig { beam, max_len })
    }
}

fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// One search step: expand incomplete beams, keep completed ones, retain the
/// best `beam` by normalized score (ties keep the earlier beam).
pub fn beam_step<M: StepModel>(
    beams: &[BeamHypothesis<M::State>],
    model: &M,
    policy: &WindowPolicy,
    beam: usize,
) -> Result<Vec<BeamHypothesis<M::State>>> {
    let mut candidates = Vec::with_capacity(beams.len() * beam);
    for hyp in beams {
        if hyp.completed {
            candidates.push(hyp.clone());
            continue;
        }
        let mut cursor = hyp.cursor;
        cursor.before_step(policy);
        let input = hyp.tokens.last().copied().unwrap_or_else(|| model.start_id());
        let (probs, state) = model.step(&hyp.state, input, cursor.window)?;
        for tok in top_k(&probs, beam) {
            let mut next_cursor = cursor;
            next_cursor.after_token(tok, policy);
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            let mut windows = hyp.windows.clone();
            windows.push(cursor.window);
            candidates.push(BeamHypothesis {
                tokens,
                log_prob: hyp.log_prob + probs[tok].ln(),
                completed: tok == model.eos_id(),
                state: state.clone(),
                cursor: next_cursor,
                windows,
            });
        }
    }
    candidates.sort_by(|a, b| b.score().total_cmp(&a.score()));
    candidates.truncate(beam);
    Ok(candidates)
}

/// Result of a search.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub windows: Vec<usize>,
    pub log_prob: f64,
    pub completed: bool,
}

impl Decoded {
    pub fn score(&self) -> f64 {
        normalized_score(self.log_prob, self.tokens.len())
    }
}

/// Runs beam search until every beam is complete or `max_len` tokens were emitted.
pub fn beam_search<M: StepModel>(model: &M, policy: &WindowPolicy, config: SearchConfig) -> Result<Decoded> {
    let mut beams = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        completed: false,
        state: model.initial_state()?,
        cursor: WindowCursor::new(model.num_windows()),
        windows: Vec::new(),
    }];
    for _ in 0..config.max_len {
        if beams.iter().all(|b| b.completed) {
            break;
        }
        beams = beam_step(&beams, model, policy, config.beam)?;
        if beams.is_empty() {
            return Err(Error::Empty("beam search found no hypothesis with non-zero probability".into()));
        }
    }
    let best = beams.swap_remove(0);
    Ok(Decoded {
        tokens: best.tokens,
        windows: best.windows,
        log_prob: best.log_prob,
        completed: best.completed,
    })
}

/// Greedy decoding (argmax at every step).
pub fn greedy_decode<M: StepModel>(model: &M, policy: &WindowPolicy, max_len: usize) -> Result<Decoded> {
    let mut state = model.initial_state()?;
    let mut cursor = WindowCursor::new(model.num_windows());
    let mut out = Decoded {
        tokens: Vec::new(),
        windows: Vec::new(),
        log_prob: 0.0,
        completed: false,
    };
    let mut input = model.start_id();
    while out.tokens.len() < max_len {
        cursor.before_step(policy);
        let (probs, next) = model.step(&state, input, cursor.window)?;
        let tok = top_k(&probs, 1)
            .pop()
            .ok_or_else(|| Error::Empty("no token with non-zero probability".into()))?;
        out.tokens.push(tok);
        out.windows.push(cursor.window);
        out.log_prob += probs[tok].ln();
        cursor.after_token(tok, policy);
        state = next;
        input = tok;
        if tok == model.eos_id() {
            out.completed = true;
            break;
        }
    }
    Ok(out)
}

/// A [`Model`] bound to one source document. Windows are encoded lazily.
pub struct DocumentDecoder<'m> {
    model: &'m Model,
    pub source: SourceText,
    pub plan: WindowPlan,
    windows: Vec<OnceCell<EncodedWindow>>,
}

impl<'m> DocumentDecoder<'m> {
    pub fn new(model: &'m Model, doc: &Document, plan: WindowPlan) -> Self {
        let source = SourceText::new(doc, &model.vocab);
        let windows = (0..plan.num_windows()).map(|_| OnceCell::new()).collect();
        DocumentDecoder {
            model,
            source,
            plan,
            windows,
        }
    }

    pub fn window(&self, i: usize) -> &EncodedWindow {
        self.windows[i].get_or_init(|| self.model.encode_window(&self.source, &self.plan, i))
    }

    pub fn encoded_windows(&self) -> usize {
        self.windows.iter().filter(|w| w.get().is_some()).count()
    }
}

impl StepModel for DocumentDecoder<'_> {
    type State = DecoderState;

    fn initial_state(&self) -> Result<DecoderState> {
        Ok(self.model.init_decoder_state(self.window(0)))
    }

    fn step(&self, state: &DecoderState, input: usize, window: usize) -> Result<(Vec<f64>, DecoderState)> {
        let mut state = state.clone();
        state.window = window;
        let (out, next) = self
            .model
            .decode_step(&state, input, self.window(window), self.source.extended_len())?;
        Ok((out.p_extended.to_vec(), next))
    }

    fn num_windows(&self) -> usize {
        self.plan.num_windows()
    }
    fn start_id(&self) -> usize {
        self.model.vocab.start()
    }
    fn eos_id(&self) -> usize {
        self.model.vocab.eos()
    }
}

/// One emitted token with the 1-based window it was generated from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub token: String,
    pub window: usize,
    pub shift: bool,
}

/// A generated summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Summary tokens without `-->` and `</s>`.
    pub tokens: Vec<String>,
    /// Every emitted token, including shifts (but not `</s>`).
    pub trace: Vec<TraceEntry>,
    pub num_windows: usize,
    /// The input was cut at `T_x` (STAN only).
    pub input_truncated: bool,
    /// `T_y` was reached without `</s>`.
    pub output_truncated: bool,
    pub score: f64,
}

impl Summary {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Distinct 1-based windows that produced at least one token.
    pub fn windows_visited(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.trace.iter().map(|e| e.window).collect();
        w.dedup();
        w
    }
}

fn finish(decoder: &DocumentDecoder<'_>, decoded: Decoded, input_truncated: bool, num_windows: usize) -> Summary {
    let vocab = &decoder.model.vocab;
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    for (&id, &w) in decoded.tokens.iter().zip(&decoded.windows) {
        if id == vocab.eos() {
            continue;
        }
        let word = decoder.source.word(id, vocab).to_string();
        let shift = id == vocab.shift();
        if !shift {
            tokens.push(word.clone());
        }
        trace.push(TraceEntry {
            token: word,
            window: w + 1,
            shift,
        });
    }
    Summary {
        tokens,
        trace,
        num_windows,
        input_truncated,
        output_truncated: !decoded.completed,
        score: decoded.score(),
    }
}

/// Decodes `doc` with the policy of the model's mode and `beam` hypotheses.
pub fn summarize(model: &Model, doc: &Document, beam: usize) -> Result<Summary> {
    let config = &model.config;
    let search = SearchConfig::new(beam, config.max_summary)?;
    match config.mode {
        Mode::Stan => {
            let input_truncated = doc.len() > config.max_input;
            if input_truncated {
                log::warn!(
                    "stan mode: input of {} tokens truncated to T_x = {}",
                    doc.len(),
                    config.max_input
                );
            }
            let doc = doc.truncated(config.max_input);
            let plan = segment(doc.len(), config.effective_window())?;
            let decoder = DocumentDecoder::new(model, &doc, plan);
            let decoded = beam_search(&decoder, &WindowPolicy::Fixed, search)?;
            Ok(finish(&decoder, decoded, input_truncated, 1))
        }
        Mode::Swm => swm_decode(model, doc, search),
        Mode::Dwm => dwm_decode(model, doc, search),
    }
}

/// Static windowing: shifts are forced by the per-window budgets.
pub fn swm_decode(model: &Model, doc: &Document, search: SearchConfig) -> Result<Summary> {
    let config = &model.config;
    let stats = config
        .stats
        .ok_or_else(|| Error::Config("swm model has no corpus statistics".into()))?;
    let plan = static_plan(doc.len(), config.window, &stats, config.k, config.d, config.max_summary)?;
    let budgets = plan.budgets.clone().unwrap_or_default();
    let n = plan.num_windows();
    let decoder = DocumentDecoder::new(model, doc, plan);
    let decoded = beam_search(&decoder, &WindowPolicy::Static(budgets), search)?;
    Ok(finish(&decoder, decoded, false, n))
}

/// Dynamic windowing: every emitted `-->` moves to the next window.
pub fn dwm_decode(model: &Model, doc: &Document, search: SearchConfig) -> Result<Summary> {
    let plan = segment(doc.len(), model.config.window)?;
    let n = plan.num_windows();
    let decoder = DocumentDecoder::new(model, doc, plan);
    let policy = WindowPolicy::Dynamic {
        shift: model.vocab.shift(),
    };
    let decoded = beam_search(&decoder, &policy, search)?;
    Ok(finish(&decoder, decoded, false, n))
}

/// The first three sentences of `doc`.
pub fn lead3(doc: &Document) -> Vec<String> {
    doc.sentences
        .iter()
        .take(3)
        .flat_map(|span| doc.tokens[span.clone()].iter().cloned())
        .collect()
}
