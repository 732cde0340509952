//! ROUGE-N and summary-level ROUGE-L, and corpus evaluation.
//!
//! Inputs are compared token by token as produced by the tokenizer
//! (lowercased, punctuation kept as tokens), without stemming or stopword
//! removal.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SummaryPair};
use crate::inference::{lead3, summarize};
use crate::model::Model;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// The reference had no n-grams; the score is zero by convention.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_reference: bool,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(overlap, candidate_total);
        let recall = ratio(overlap, reference_total);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
            empty_reference: reference_total == 0,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap; precision against the candidate, recall against
/// the reference.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(overlap, cand.values().sum(), refs.values().sum())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Summary-level ROUGE-L over the whole token sequences.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// A system that produces summary tokens for a document.
pub trait Summarizer: Sync {
    fn name(&self) -> String;
    fn summarize(&self, doc: &Document) -> Result<Vec<String>>;
}

pub struct Lead3;

impl Summarizer for Lead3 {
    fn name(&self) -> String {
        "Lead-3".into()
    }

    fn summarize(&self, doc: &Document) -> Result<Vec<String>> {
        Ok(lead3(doc))
    }
}

pub struct ModelSummarizer<'a> {
    pub model: &'a Model,
    pub beam: usize,
}

impl Summarizer for ModelSummarizer<'_> {
    fn name(&self) -> String {
        self.model.config.mode.to_string().to_uppercase()
    }

    fn summarize(&self, doc: &Document) -> Result<Vec<String>> {
        Ok(summarize(self.model, doc, self.beam)?.tokens)
    }
}

/// Per-document ROUGE scores of one summary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DocumentScores {
    pub rouge_1: RougeScore,
    pub rouge_2: RougeScore,
    pub rouge_l: RougeScore,
}

impl DocumentScores {
    pub fn score<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Self {
        DocumentScores {
            rouge_1: rouge_n(candidate, reference, 1),
            rouge_2: rouge_n(candidate, reference, 2),
            rouge_l: rouge_l(candidate, reference),
        }
    }
}

/// Corpus means of per-document scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEvaluation {
    pub system: String,
    pub documents: usize,
    pub failures: usize,
    pub empty_references: usize,
    pub rouge_1: RougeScore,
    pub rouge_2: RougeScore,
    pub rouge_l: RougeScore,
}

fn mean(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        empty_reference: false,
    }
}

/// Summarizes every document and averages the scores. Documents whose
/// decoding fails are logged, excluded and counted.
pub fn evaluate_corpus(system: &dyn Summarizer, corpus: &[SummaryPair]) -> CorpusEvaluation {
    let results: Vec<Result<DocumentScores>> = corpus
        .par_iter()
        .map(|pair| {
            let candidate = system.summarize(&pair.document)?;
            Ok(DocumentScores::score(&candidate, &pair.summary.tokens))
        })
        .collect();
    let mut scored = Vec::with_capacity(results.len());
    let mut failures = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => scored.push(s),
            Err(e) => {
                log::warn!("document {}: decoding failed: {e}", i + 1);
                failures += 1;
            }
        }
    }
    let pick = |f: fn(&DocumentScores) -> RougeScore| scored.iter().map(f).collect::<Vec<_>>();
    CorpusEvaluation {
        system: system.name(),
        documents: scored.len(),
        failures,
        empty_references: scored.iter().filter(|s| s.rouge_1.empty_reference).count(),
        rouge_1: mean(&pick(|s| s.rouge_1)),
        rouge_2: mean(&pick(|s| s.rouge_2)),
        rouge_l: mean(&pick(|s| s.rouge_l)),
    }
}

/// Fixed-column table of F1 scores (in percent).
pub fn format_table(rows: &[CorpusEvaluation]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>6}", "Model", "R-1", "R-2", "R-L", "Docs");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>6}",
            r.system,
            100.0 * r.rouge_1.f1,
            100.0 * r.rouge_2.f1,
            100.0 * r.rouge_l.f1,
            r.documents
        );
    }
    out
}
