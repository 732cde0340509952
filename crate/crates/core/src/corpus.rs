//! Tokenization, sentence splitting, vocabulary and corpus ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const START: &str = "<s>";
pub const EOS: &str = "</s>";
/// Surface form of the window-shift token in files and traces.
pub const SHIFT: &str = "-->";

/// Number of special symbols appended after the content words.
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_SEED: u64 = 0x5eed_0f5e_c1a1;
const SPECIAL_SCALE: f64 = 0.1;

/// Lowercases `text`, splits on whitespace and emits every non-alphanumeric
/// character as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in lowered.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn is_sentence_terminator(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

/// Sentence spans end after `.`, `!` or `?`; an unterminated tail is kept.
pub fn split_sentences<S: AsRef<str>>(tokens: &[S]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if is_sentence_terminator(tok.as_ref()) {
            spans.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push(start..tokens.len());
    }
    spans
}

/// A tokenized text with its sentence partition.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<String>,
    pub sentences: Vec<Range<usize>>,
}

impl Document {
    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(tokenize(text))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let sentences = split_sentences(&tokens);
        Document { tokens, sentences }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentence(&self, i: usize) -> &[String] {
        &self.tokens[self.sentences[i].clone()]
    }

    /// Keeps the first `max_len` tokens, re-splitting sentences.
    pub fn truncated(&self, max_len: usize) -> Document {
        if self.len() <= max_len {
            return self.clone();
        }
        Document::from_tokens(self.tokens[..max_len].to_vec())
    }
}

/// A source document with its reference summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryPair {
    pub document: Document,
    pub summary: Document,
    /// Summary tokens with `-->` shift tokens injected (no trailing `</s>`).
    pub summary_shifted: Option<Vec<String>>,
}

impl SummaryPair {
    pub fn new(document: &str, summary: &str) -> Self {
        SummaryPair {
            document: Document::from_text(document),
            summary: Document::from_text(summary),
            summary_shifted: None,
        }
    }
}

/// Word list with the bijective word/id mapping. Content words come first in
/// file order, followed by `<pad>`, `<unk>`, `<s>`, `</s>` and `-->`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    content: usize,
}

impl Vocabulary {
    pub fn new<I, S>(content_words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = content_words.into_iter().map(Into::into).collect();
        let content = words.len();
        words.extend([PAD, UNK, START, EOS, SHIFT].map(String::from));
        let mut index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Config(format!("empty word at vocabulary index {id}")));
            }
            if index.insert(w.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            content,
        })
    }

    /// Total size including the special symbols.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.content
    }

    pub fn pad(&self) -> usize {
        self.content
    }
    pub fn unk(&self) -> usize {
        self.content + 1
    }
    pub fn start(&self) -> usize {
        self.content + 2
    }
    pub fn eos(&self) -> usize {
        self.content + 3
    }
    pub fn shift(&self) -> usize {
        self.content + 4
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or `<unk>` when out of vocabulary.
    pub fn encode(&self, word: &str) -> usize {
        self.id(word).unwrap_or_else(|| self.unk())
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn content_words(&self) -> &[String] {
        &self.words[..self.content]
    }

    /// Whether the generation distribution places mass on `id`. `<pad>` and
    /// `<s>` are never generated.
    pub fn is_output(&self, id: usize) -> bool {
        id < self.len() && id != self.pad() && id != self.start()
    }
}

/// `|V| x d_emb` embedding matrix aligned with a [`Vocabulary`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Array2<f64>,
}

impl EmbeddingTable {
    /// Builds the full table from content-word rows, appending the special
    /// rows: zeros for `<pad>`, small seeded pseudo-random vectors otherwise.
    pub fn with_specials(content: Array2<f64>) -> Self {
        let (n, dim) = content.dim();
        let mut matrix = Array2::zeros((n + NUM_SPECIALS, dim));
        matrix.slice_mut(ndarray::s![..n, ..]).assign(&content);
        let mut rng = ChaCha8Rng::seed_from_u64(SPECIAL_SEED);
        // pad stays zero
        for row in (n + 1)..(n + NUM_SPECIALS) {
            for col in 0..dim {
                matrix[[row, col]] = rng.gen_range(-SPECIAL_SCALE..SPECIAL_SCALE);
            }
        }
        EmbeddingTable { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn row(&self, id: usize) -> ndarray::ArrayView1<'_, f64> {
        self.matrix.row(id)
    }
}

/// Reads embeddings in the whitespace-separated text format, keeping the first
/// `vocab_size` words in file order. An optional `<count> <dim>` header line
/// is recognised.
pub fn load_embeddings(path: impl AsRef<Path>, vocab_size: usize) -> Result<(Vocabulary, EmbeddingTable)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), path, vocab_size)
}

pub fn parse_embeddings<R: BufRead>(
    reader: R,
    path: &Path,
    vocab_size: usize,
) -> Result<(Vocabulary, EmbeddingTable)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut dim: Option<usize> = None;
    let mut words = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut first = true;

    for (i, line) in reader.lines().enumerate() {
        if words.len() >= vocab_size {
            break;
        }
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if first {
            first = false;
            if fields.len() == 2 {
                if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    if d == 0 {
                        return Err(parse_err(lineno, "header declares zero dimensions".into()));
                    }
                    dim = Some(d);
                    continue;
                }
            }
        }
        let found = fields.len() - 1;
        let expected = *dim.get_or_insert(found);
        if found == 0 {
            return Err(parse_err(lineno, format!("word `{}` has no vector values", fields[0])));
        }
        if found != expected {
            return Err(parse_err(lineno, format!("expected {expected} values, found {found}")));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("malformed number `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value `{f}`")));
            }
            values.push(v);
        }
        words.push(fields[0].to_string());
    }

    let dim = dim.ok_or_else(|| Error::Empty(format!("{} contains no embeddings", path.display())))?;
    let n = words.len();
    let vocab = Vocabulary::new(words).map_err(|e| parse_err(0, e.to_string()))?;
    let content = Array2::from_shape_vec((n, dim), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((vocab, EmbeddingTable::with_specials(content)))
}

#[derive(Deserialize)]
struct RawRecord {
    document: Option<String>,
    summary: Option<String>,
    summary_shifted: Option<String>,
}

/// Reads a JSONL corpus with string fields `document` and `summary`, and an
/// optional pre-tokenized `summary_shifted`.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SummaryPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), path)
}

pub fn parse_corpus<R: BufRead>(reader: R, path: &Path) -> Result<Vec<SummaryPair>> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let missing = |field: &str| parse_err(format!("missing string field \"{field}\""));
        let document = raw.document.ok_or_else(|| missing("document"))?;
        let summary = raw.summary.ok_or_else(|| missing("summary"))?;
        let mut pair = SummaryPair::new(&document, &summary);
        pair.summary_shifted = raw
            .summary_shifted
            .map(|s| s.split_whitespace().map(String::from).collect());
        pairs.push(pair);
    }
    Ok(pairs)
}
