//! Deterministic synthetic corpora and embeddings for tests and demos.
//!
//! A headline document is a run of fixed-length sentences laid over windows
//! of `T_w` tokens with stride `ss`. The sentence starting each window is a
//! headline drawn from a reserved word set; all other sentences use filler
//! words. The reference summary is the headlines in window order, so a model
//! that copies headlines and shifts after each one is exactly right.

use std::collections::HashSet;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EmbeddingTable, SummaryPair, Vocabulary};
use crate::windowing::{segment, WindowSpec};
use crate::{Error, Result};

const EMBEDDING_SCALE: f64 = 0.5;

/// Layout of headline documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadlineCorpus {
    pub headline_words: usize,
    pub filler_words: usize,
    /// Words per sentence, excluding the final `.`.
    pub sentence_words: usize,
    pub window: WindowSpec,
}

impl HeadlineCorpus {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        let s = self.sentence_words + 1;
        if self.sentence_words == 0 || self.headline_words == 0 || self.filler_words == 0 {
            return Err(Error::Config("headline corpus needs non-empty word sets and sentences".into()));
        }
        if !self.window.stride.is_multiple_of(s) || !self.window.window.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "window {} and stride {} must be multiples of the sentence length {s}",
                self.window.window, self.window.stride
            )));
        }
        Ok(())
    }

    pub fn headline_vocab(&self) -> Vec<String> {
        (0..self.headline_words).map(|i| format!("h{i}")).collect()
    }

    pub fn filler_vocab(&self) -> Vec<String> {
        (0..self.filler_words).map(|i| format!("f{i}")).collect()
    }

    /// Every word a document can contain, `.` included.
    pub fn words(&self) -> Vec<String> {
        let mut words = self.headline_vocab();
        words.extend(self.filler_vocab());
        words.push(".".into());
        words
    }

    /// Token length of a document spanning `windows` full windows.
    pub fn doc_len(&self, windows: usize) -> usize {
        self.window.stride * windows.saturating_sub(1) + self.window.window
    }

    /// One document of `doc_len` tokens (rounded up to whole sentences) and
    /// its summary. Headlines within a document are pairwise distinct.
    pub fn document(&self, doc_len: usize, rng: &mut impl Rng) -> Result<SummaryPair> {
        self.validate()?;
        let s = self.sentence_words + 1;
        let sentences = doc_len.div_ceil(s).max(1);
        let headlines = self.headline_vocab();
        let filler = self.filler_vocab();
        let offsets: HashSet<usize> = segment(sentences * s, self.window)?.offsets.into_iter().collect();
        let sentence = |words: &[String], rng: &mut dyn rand::RngCore| -> Vec<String> {
            (0..self.sentence_words)
                .map(|_| words.choose(rng).expect("non-empty word set").clone())
                .collect()
        };

        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let mut doc = Vec::with_capacity(sentences * s);
        let mut summary = Vec::new();
        for i in 0..sentences {
            let start = i * s;
            let headline = offsets.contains(&start);
            let mut words = if headline {
                let mut tries = 0;
                loop {
                    let w = sentence(&headlines, rng);
                    if seen.insert(w.clone()) {
                        break w;
                    }
                    tries += 1;
                    if tries > 1000 {
                        return Err(Error::Config("too few headline words for distinct headlines".into()));
                    }
                }
            } else {
                sentence(&filler, rng)
            };
            words.push(".".into());
            if headline {
                summary.extend(words.iter().cloned());
            }
            doc.extend(words);
        }
        Ok(SummaryPair::new(&doc.join(" "), &summary.join(" ")))
    }

    /// `n` documents spanning `windows` windows each.
    pub fn generate(&self, n: usize, windows: usize, seed: u64) -> Result<Vec<SummaryPair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.document(self.doc_len(windows), &mut rng)).collect()
    }
}

/// Seeded uniform embeddings for `words`, with the special rows appended.
pub fn random_embeddings(words: &[String], dim: usize, seed: u64) -> Result<(Vocabulary, EmbeddingTable)> {
    let vocab = Vocabulary::new(words.iter().cloned())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = Array2::from_shape_simple_fn((words.len(), dim), || {
        rng.gen_range(-EMBEDDING_SCALE..EMBEDDING_SCALE)
    });
    Ok((vocab, EmbeddingTable::with_specials(content)))
}

/// Content-word rows in the whitespace text format read by
/// [`crate::corpus::load_embeddings`].
pub fn embeddings_text(vocab: &Vocabulary, table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for (i, word) in vocab.content_words().iter().enumerate() {
        out.push_str(word);
        for v in table.row(i) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}
