//! Negative log-likelihood training with Adam and dev-set ROUGE-L model
//! selection.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{SummaryPair, EOS};
use crate::eval::{evaluate_corpus, ModelSummarizer};
use crate::inference::{WindowCursor, WindowPolicy};
use crate::model::{Gradients, Model, SourceText, TeacherForced, Weights};
use crate::windowing::{annotate_pair, segment, static_plan};
use crate::{Error, Mode, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of target probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    pub loss: f64,
    /// Steps whose probability was clamped to [`PROB_FLOOR`].
    pub clamped: usize,
}

/// `mean_t -log P_t(target_t)` over the given step distributions.
pub fn nll_loss(distributions: &[Array1<f64>], targets: &[usize]) -> Nll {
    assert_eq!(distributions.len(), targets.len());
    if targets.is_empty() {
        return Nll { loss: 0.0, clamped: 0 };
    }
    let mut clamped = 0;
    let total: f64 = distributions
        .iter()
        .zip(targets)
        .map(|(p, &t)| {
            let prob = p[t];
            if prob < PROB_FLOOR {
                clamped += 1;
            }
            -prob.max(PROB_FLOOR).ln()
        })
        .sum();
    if clamped > 0 {
        log::debug!("nll: {clamped} target probabilities clamped to {PROB_FLOOR}");
    }
    Nll {
        loss: total / targets.len() as f64,
        clamped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Beam size used for dev-set decoding.
    pub beam: usize,
    /// Evaluate on the dev set every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 10,
            clip_norm: 2.0,
            seed: 1,
            beam: 3,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.beam == 0 {
            return Err(Error::Config("batch size and beam must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer hyper-parameters".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Weights,
    pub v: Weights,
    pub m_emb: Array2<f64>,
    pub v_emb: Array2<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let g = Gradients::zeros(model);
        AdamState {
            m: g.weights.clone(),
            v: g.weights,
            m_emb: g.embeddings.clone(),
            v_emb: g.embeddings,
            step: 0,
        }
    }
}

/// Bias-corrected Adam on flat slices; `step` is the 1-based update count.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    config: &TrainConfig,
) {
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
}

/// One Adam update of every trainable parameter of `model`.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut AdamState, lr: f64, config: &TrainConfig) {
    state.step += 1;
    let step = state.step;
    let params = model.params.weights.tensors_mut();
    let grad_tensors = grads.weights.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(grad_tensors).zip(m).zip(v) {
        adam_update(p, g, m, v, step, lr, config);
    }
    let (m_emb, v_emb) = (&mut state.m_emb, &mut state.v_emb);
    for (slot, mut row) in model.embedding_rows_mut() {
        let p = row.as_slice_mut().expect("standard layout");
        adam_update(
            p,
            grads.embeddings.row(slot).as_slice().expect("standard layout"),
            m_emb.row_mut(slot).into_slice().expect("standard layout"),
            v_emb.row_mut(slot).into_slice().expect("standard layout"),
            step,
            lr,
            config,
        );
    }
}

/// Rescales `grads` so that its global norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Builds the teacher-forced sequence for `pair` under the model's mode.
///
/// STAN truncates the document to `T_x`; SWM and DWM keep it whole. Targets
/// are capped at `T_y` steps and always end with `</s>`.
pub fn prepare_example(model: &Model, pair: &SummaryPair) -> Result<TeacherForced> {
    let config = &model.config;
    let vocab = &model.vocab;
    let doc = match config.mode {
        Mode::Stan => pair.document.truncated(config.max_input),
        _ => pair.document.clone(),
    };
    if doc.is_empty() {
        return Err(Error::Empty("training document has no tokens".into()));
    }
    let source = SourceText::new(&doc, vocab);

    let (plan, words) = match config.mode {
        Mode::Stan => (segment(doc.len(), config.effective_window())?, pair.summary.tokens.clone()),
        Mode::Swm => {
            let stats = config
                .stats
                .ok_or_else(|| Error::Config("swm training needs corpus statistics".into()))?;
            let plan = static_plan(doc.len(), config.window, &stats, config.k, config.d, config.max_summary)?;
            (plan, pair.summary.tokens.clone())
        }
        Mode::Dwm => {
            let plan = segment(doc.len(), config.window)?;
            let words = match &pair.summary_shifted {
                Some(shifted) => shifted.clone(),
                None => {
                    let mut tokens = annotate_pair(pair, config.window, vocab, &model.params.embeddings)?.tokens;
                    tokens.pop();
                    tokens
                }
            };
            (plan, words)
        }
    };

    let keep = config.max_summary.saturating_sub(1).min(words.len());
    let mut targets: Vec<usize> = words[..keep]
        .iter()
        .filter(|w| w.as_str() != EOS)
        .map(|w| source.target_id(w, vocab))
        .collect();
    targets.push(vocab.eos());

    let policy = match config.mode {
        Mode::Stan => WindowPolicy::Fixed,
        Mode::Swm => WindowPolicy::Static(plan.budgets.clone().unwrap_or_default()),
        Mode::Dwm => WindowPolicy::Dynamic { shift: vocab.shift() },
    };
    let windows = WindowCursor::trace(plan.num_windows(), &policy, &targets);
    Ok(TeacherForced {
        source,
        plan,
        targets,
        windows,
    })
}

/// Teacher-forced examples for a whole corpus; errors name the 1-based record.
pub fn prepare_corpus(model: &Model, pairs: &[SummaryPair]) -> Result<Vec<TeacherForced>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            prepare_example(model, p).map_err(|e| Error::Record {
                record: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Summed loss and summed gradients over `batch`. Examples are processed in
/// parallel and reduced in batch order.
pub fn batch_gradients(model: &Model, batch: &[TeacherForced]) -> Result<(f64, Gradients)> {
    let per_example: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Gradients::zeros(model);
            let loss = model.sequence_loss(ex, Some(&mut g))?;
            Ok((loss, g))
        })
        .collect();
    let mut total = Gradients::zeros(model);
    let mut loss = 0.0;
    for r in per_example {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub dev_rouge_l: Option<f64>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let dev = self.dev_rouge_l.map_or_else(|| "nan".to_string(), |r| format!("{r:.6}"));
        format!("{},{},{:.6},{}", self.epoch, self.step, self.loss, dev)
    }
}

pub const LOG_HEADER: &str = "epoch,step,loss,dev_rouge_l";

/// Index of the first maximum among finite scores.
pub fn select_best(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if s.is_finite() && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Optimizer state and progress; resumable from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<(usize, f64, Model)>,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model);
        Trainer {
            model,
            adam,
            epoch: 0,
            history: Vec::new(),
            best: None,
        }
    }

    pub fn resume(model: Model, adam: AdamState, epoch: usize) -> Self {
        Trainer {
            model,
            adam,
            epoch,
            history: Vec::new(),
            best: None,
        }
    }

    /// Runs one epoch over `examples` and returns the mean example loss.
    pub fn run_epoch(&mut self, examples: &[TeacherForced], config: &TrainConfig) -> Result<f64> {
        let epoch = self.epoch + 1;
        // length-sorted batches, shuffled in a seed- and epoch-dependent order
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.sort_by_key(|&i| (examples[i].source.len(), i));
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
        batches.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch_idx in batches {
            let batch: Vec<TeacherForced> = batch_idx.iter().map(|&i| examples[i].clone()).collect();
            let (loss, mut grads) = batch_gradients(&self.model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: self.adam.step as usize,
                    loss,
                });
            }
            loss_sum += loss;
            grads.scale(1.0 / batch.len() as f64);
            clip_gradients(&mut grads, config.clip_norm);
            adam_step(&mut self.model, &grads, &mut self.adam, config.learning_rate, config);
        }
        self.epoch = epoch;
        Ok(loss_sum / examples.len().max(1) as f64)
    }

    /// Runs one epoch, then scores `dev` when due and keeps the best model by
    /// dev ROUGE-L F1.
    pub fn epoch(&mut self, examples: &[TeacherForced], dev: &[SummaryPair], config: &TrainConfig) -> Result<EpochRecord> {
        let loss = self.run_epoch(examples, config)?;
        let dev_rouge_l = if !dev.is_empty() && config.eval_every > 0 && self.epoch.is_multiple_of(config.eval_every) {
            let system = ModelSummarizer {
                model: &self.model,
                beam: config.beam,
            };
            Some(evaluate_corpus(&system, dev).rouge_l.f1)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: self.epoch,
            step: self.adam.step,
            loss,
            dev_rouge_l,
        };
        log::info!("{}", record.log_line());
        if let Some(score) = dev_rouge_l {
            if self.best.as_ref().is_none_or(|(_, b, _)| score > *b) {
                self.best = Some((self.epoch, score, self.model.clone()));
            }
        }
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains for `config.epochs` more epochs. `on_epoch` sees every log record.
    pub fn train(
        &mut self,
        train: &[SummaryPair],
        dev: &[SummaryPair],
        config: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        config.validate()?;
        let examples = prepare_corpus(&self.model, train)?;
        for _ in 0..config.epochs {
            let record = self.epoch(&examples, dev, config)?;
            on_epoch(&record);
        }
        Ok(())
    }

    /// The dev-selected model, or the latest one when no dev scores exist.
    pub fn best_model(&self) -> &Model {
        self.best.as_ref().map_or(&self.model, |(_, _, m)| m)
    }
}
