//! Window segmentation of long documents, static per-window decode budgets,
//! and shift-token annotation of reference summaries.

use std::ops::Range;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EmbeddingTable, SummaryPair, Vocabulary, EOS, SHIFT};
use crate::{Error, Result};

/// Fraction of lengths a majority length must cover, as `NUM / DEN`.
const MAJORITY_NUM: usize = 9;
const MAJORITY_DEN: usize = 10;

/// Window length `T_w` and stride `ss`, both in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let spec = WindowSpec { window, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::WindowSpec(format!(
                "need 0 < stride <= window, got window={} stride={}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// The windows laid over one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub spec: WindowSpec,
    pub doc_len: usize,
    pub offsets: Vec<usize>,
    /// Pad positions at the end of the last window.
    pub padded_tail: usize,
    /// Per-window decode budgets (static windowing only).
    pub budgets: Option<Vec<usize>>,
}

impl WindowPlan {
    pub fn num_windows(&self) -> usize {
        self.offsets.len()
    }

    /// Document token range covered by window `i` (0-based), without padding.
    pub fn range(&self, i: usize) -> Range<usize> {
        let start = self.offsets[i];
        start..(start + self.spec.window).min(self.doc_len)
    }

    pub fn contains(&self, i: usize, pos: usize) -> bool {
        self.range(i).contains(&pos)
    }

    pub fn with_budgets(mut self, budgets: Vec<usize>) -> Self {
        debug_assert_eq!(budgets.len(), self.num_windows());
        self.budgets = Some(budgets);
        self
    }
}

/// Splits `doc_len` tokens into `max(1, ceil((doc_len - T_w) / ss) + 1)`
/// overlapping windows; the last window is padded up to `T_w`.
pub fn segment(doc_len: usize, spec: WindowSpec) -> Result<WindowPlan> {
    spec.validate()?;
    if doc_len == 0 {
        return Err(Error::Empty("cannot segment an empty document".into()));
    }
    let n = if doc_len <= spec.window {
        1
    } else {
        (doc_len - spec.window).div_ceil(spec.stride) + 1
    };
    let offsets: Vec<usize> = (0..n).map(|i| i * spec.stride).collect();
    let padded_tail = (offsets[n - 1] + spec.window).saturating_sub(doc_len);
    Ok(WindowPlan {
        spec,
        doc_len,
        offsets,
        padded_tail,
        budgets: None,
    })
}

/// Normalized window weights: softmax over the logits `-k (1 + i d^i)` for
/// windows `i = 1..=n`.
pub fn static_weights(n: usize, k: f64, d: f64) -> Vec<f64> {
    let logits: Vec<f64> = (1..=n).map(|i| -k * (1.0 + i as f64 * d.powi(i as i32))).collect();
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Length statistics of a training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub majority_doc_len: usize,
    pub majority_sum_len: usize,
}

impl CorpusStats {
    pub fn new(majority_doc_len: usize, majority_sum_len: usize) -> Result<Self> {
        if majority_doc_len == 0 || majority_sum_len == 0 {
            return Err(Error::Config(format!(
                "corpus statistics must be positive, got doc={majority_doc_len} summary={majority_sum_len}"
            )));
        }
        Ok(CorpusStats {
            majority_doc_len,
            majority_sum_len,
        })
    }

    /// Majority lengths over full (untruncated) document and summary token counts.
    pub fn from_corpus(pairs: &[SummaryPair]) -> Result<Self> {
        let docs: Vec<usize> = pairs.iter().map(|p| p.document.len()).collect();
        let sums: Vec<usize> = pairs.iter().map(|p| p.summary.len()).collect();
        Self::new(majority_length(&docs)?, majority_length(&sums)?)
    }
}

/// Smallest length `v` such that at least 90% of `lengths` are `<= v`.
pub fn majority_length(lengths: &[usize]) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::Empty("majority length of an empty list".into()));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let covered = (MAJORITY_NUM * sorted.len()).div_ceil(MAJORITY_DEN);
    Ok(sorted[covered.max(1) - 1])
}

/// `round(majority_sum_len * doc_len / majority_doc_len)`, clamped to `[1, max_len]`.
pub fn expected_summary_length(doc_len: usize, stats: &CorpusStats, max_len: usize) -> usize {
    let num = stats.majority_sum_len as u128 * doc_len as u128;
    let den = stats.majority_doc_len as u128;
    // round half up
    let rounded = ((2 * num + den) / (2 * den)) as usize;
    rounded.clamp(1, max_len.max(1))
}

/// Integer budgets proportional to `weights` that sum exactly to
/// `expected_len` (largest-remainder method, ties to the earlier window).
pub fn window_budgets(weights: &[f64], expected_len: usize) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let total: f64 = weights.iter().sum();
    let reals: Vec<f64> = weights.iter().map(|w| expected_len as f64 * w / total).collect();
    let mut budgets: Vec<usize> = reals.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = budgets.iter().sum();

    let mut order: Vec<usize> = (0..weights.len()).collect();
    let frac = |i: usize| reals[i] - reals[i].floor();
    if assigned <= expected_len {
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(expected_len - assigned) {
            budgets[i] += 1;
        }
    } else {
        // rounding overshoot: take back from the smallest remainders
        order.sort_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(a.cmp(&b)));
        let mut excess = assigned - expected_len;
        for &i in order.iter().cycle() {
            if excess == 0 {
                break;
            }
            if budgets[i] > 0 {
                budgets[i] -= 1;
                excess -= 1;
            }
        }
    }
    budgets
}

/// Full static-windowing plan for a document of `doc_len` tokens.
pub fn static_plan(
    doc_len: usize,
    spec: WindowSpec,
    stats: &CorpusStats,
    k: f64,
    d: f64,
    max_len: usize,
) -> Result<WindowPlan> {
    let plan = segment(doc_len, spec)?;
    let weights = static_weights(plan.num_windows(), k, d);
    let budgets = window_budgets(&weights, expected_summary_length(doc_len, stats, max_len));
    Ok(plan.with_budgets(budgets))
}

/// Sum of the token embeddings of `tokens`; unknown words contribute `<unk>`.
pub fn sentence_embedding<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, table: &EmbeddingTable) -> Array1<f64> {
    let mut sum = Array1::zeros(table.dim());
    for t in tokens {
        sum += &table.row(vocab.encode(t.as_ref()));
    }
    sum
}

/// Cosine similarity, 0 when either vector has zero norm.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// 1-based window of a source sentence: the last window holding the whole
/// span, or, for a span straddling a boundary, the last window holding its
/// final token.
pub fn sentence_window(span: &Range<usize>, plan: &WindowPlan) -> usize {
    let last = span.end - 1;
    (0..plan.num_windows())
        .rev()
        .find(|&w| plan.contains(w, span.start) && plan.contains(w, last))
        .or_else(|| (0..plan.num_windows()).rev().find(|&w| plan.contains(w, last)))
        .map(|w| w + 1)
        .expect("segment covers every document position")
}

/// For each summary sentence, the 1-based window of its most similar source
/// sentence (cosine over summed embeddings; ties go to the earliest sentence).
pub fn map_summary_to_windows(
    pair: &SummaryPair,
    plan: &WindowPlan,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Vec<usize> {
    let doc = &pair.document;
    let sources: Vec<Array1<f64>> = (0..doc.sentences.len())
        .map(|i| sentence_embedding(doc.sentence(i), vocab, table))
        .collect();
    let summary = &pair.summary;
    (0..summary.sentences.len())
        .map(|s| {
            let query = sentence_embedding(summary.sentence(s), vocab, table);
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (i, src) in sources.iter().enumerate() {
                let sim = cosine(&query, src);
                if sim > best_sim {
                    best = i;
                    best_sim = sim;
                }
            }
            if sources.is_empty() {
                1
            } else {
                sentence_window(&doc.sentences[best], plan)
            }
        })
        .collect()
}

/// Replaces sequence-breaking indices by the running maximum.
pub fn sequentialize(indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .scan(0, |max, &i| {
            *max = (*max).max(i);
            Some(*max)
        })
        .collect()
}

/// A reference summary annotated with window-shift tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftAnnotatedSummary {
    /// Summary tokens with `-->` injected and `</s>` appended.
    pub tokens: Vec<String>,
    pub raw_windows: Vec<usize>,
    pub windows: Vec<usize>,
}

impl ShiftAnnotatedSummary {
    /// Tokens without the trailing `</s>`, as written to `summary_shifted`.
    pub fn shifted_text(&self) -> String {
        let body = match self.tokens.last() {
            Some(t) if t == EOS => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens[..],
        };
        body.join(" ")
    }
}

/// Emits `windows[0] - 1` leading shifts, `windows[j+1] - windows[j]` shifts
/// between sentences `j` and `j+1`, and a final `</s>`.
pub fn inject_shift_tokens(summary: &Document, windows: &[usize]) -> ShiftAnnotatedSummary {
    assert_eq!(
        windows.len(),
        summary.sentences.len(),
        "one window index per summary sentence"
    );
    let shift = || SHIFT.to_string();
    let mut tokens = Vec::with_capacity(summary.len() + windows.len() + 1);
    let mut current = 1;
    for (s, &w) in windows.iter().enumerate() {
        tokens.extend(std::iter::repeat_with(shift).take(w.saturating_sub(current)));
        current = current.max(w);
        tokens.extend_from_slice(summary.sentence(s));
    }
    tokens.push(EOS.to_string());
    ShiftAnnotatedSummary {
        tokens,
        raw_windows: windows.to_vec(),
        windows: windows.to_vec(),
    }
}

/// Removes `-->` and `</s>`.
pub fn strip_shift_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| *t != SHIFT && *t != EOS)
        .map(String::from)
        .collect()
}

/// Maps, sequentializes and injects shifts for one training pair.
pub fn annotate_pair(
    pair: &SummaryPair,
    spec: WindowSpec,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Result<ShiftAnnotatedSummary> {
    let plan = segment(pair.document.len(), spec)?;
    let raw = map_summary_to_windows(pair, &plan, vocab, table);
    let seq = sequentialize(&raw);
    let mut annotated = inject_shift_tokens(&pair.summary, &seq);
    annotated.raw_windows = raw;
    Ok(annotated)
}
