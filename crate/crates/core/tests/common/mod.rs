//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use winsum::corpus::SummaryPair;
use winsum::model::{Model, ModelConfig, TeacherForced};
use winsum::synthetic::{random_embeddings, HeadlineCorpus};
use winsum::training::prepare_example;
use winsum::windowing::{CorpusStats, WindowSpec};
use winsum::Mode;

/// d_emb = 8, hidden = 4, |V| = 20 (15 content words + 5 specials), T_w = 6.
/// SWM and DWM lay two windows (stride 4) over a 10-token document; STAN uses
/// a single window with T_x = 6. The source holds out-of-vocabulary words and
/// the targets need copying, generation and (DWM) a shift.
pub fn toy_problem(mode: Mode) -> (Model, TeacherForced) {
    let mut words: Vec<String> = (0..14).map(|i| format!("w{i}")).collect();
    words.push(".".into());
    let (vocab, table) = random_embeddings(&words, 8, 11).unwrap();
    assert_eq!(vocab.len(), 20);
    let (window, max_input) = match mode {
        Mode::Stan => (WindowSpec::new(6, 6).unwrap(), 6),
        _ => (WindowSpec::new(6, 4).unwrap(), 10),
    };
    let config = ModelConfig {
        mode,
        window,
        max_input,
        max_summary: 12,
        k: 0.8,
        d: 1.2,
        stats: Some(CorpusStats::new(10, 6).unwrap()),
        hidden: 4,
        train_embeddings: true,
    };
    let mut model = Model::new(config, vocab, table, 5).unwrap();
    // larger weights push the gates away from their linear regime
    for (_, t) in model.params.weights.tensors_mut() {
        t.iter_mut().for_each(|x| *x *= 5.0);
    }
    let mut pair = SummaryPair::new("w0 w1 zz w2 . w3 yy w4 zz .", "w0 zz . w3 yy w9 .");
    pair.summary_shifted = Some("w0 zz . --> w3 yy w9 .".split(' ').map(String::from).collect());
    let example = prepare_example(&model, &pair).unwrap();
    (model, example)
}

/// Two windows of three 4-token sentences each; summaries are the two
/// window-initial headlines.
pub fn copy_corpus() -> HeadlineCorpus {
    HeadlineCorpus {
        headline_words: 8,
        filler_words: 8,
        sentence_words: 3,
        window: WindowSpec::new(12, 12).unwrap(),
    }
}

pub fn copy_model(corpus: &HeadlineCorpus, seed: u64) -> Model {
    let (vocab, table) = random_embeddings(&corpus.words(), 16, 3).unwrap();
    let config = ModelConfig {
        mode: Mode::Dwm,
        window: corpus.window,
        max_input: corpus.doc_len(2),
        max_summary: 20,
        hidden: 16,
        ..ModelConfig::default()
    };
    Model::new(config, vocab, table, seed).unwrap()
}

/// Index of the first `-->` in `tokens` if it directly follows the first
/// sentence and is followed by more content.
pub fn first_shift_is_correct(tokens: &[String]) -> bool {
    let first_stop = tokens.iter().position(|t| t == ".");
    let first_shift = tokens.iter().position(|t| t == "-->");
    match (first_stop, first_shift) {
        (Some(stop), Some(shift)) => {
            shift == stop + 1 && tokens.get(shift + 1).is_some_and(|t| t != "-->" && t != ".")
        }
        _ => false,
    }
}
