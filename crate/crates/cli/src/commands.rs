//! Subcommand implementations.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde_json::json;
use winsum::checkpoint::{self, write_atomic, Checkpoint, TrainingState};
use winsum::corpus::{load_corpus, load_embeddings, parse_corpus, Document, SummaryPair};
use winsum::eval::{evaluate_corpus, format_table, Lead3, ModelSummarizer};
use winsum::inference;
use winsum::model::{Model, ModelConfig};
use winsum::synthetic::{embeddings_text, random_embeddings, HeadlineCorpus};
use winsum::training::{prepare_corpus, TrainConfig, Trainer, LOG_HEADER};
use winsum::windowing::{annotate_pair, CorpusStats, WindowSpec};
use winsum::Mode;

use crate::config::ConfigFile;
use crate::render::{render, trace_jsonl};
use crate::{
    Baseline, EvaluateArgs, Failure, ModelFlags, PreprocessArgs, SummarizeArgs, SynthArgs, TrainArgs,
};

const DEFAULT_VOCAB_SIZE: usize = 50_000;
const DEFAULT_BEAM: usize = 4;

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

fn require_file(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let path = path.ok_or_else(|| usage(format!("{flag} is required")))?;
    if !path.is_file() {
        return Err(usage(format!("{flag}: {} does not exist", path.display())));
    }
    Ok(path)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, bytes).map_err(Failure::from)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// `base` with every flag or config value applied. STAN always uses a single
/// window of `T_x` tokens.
fn model_config(flags: &ModelFlags, cfg: &ConfigFile, base: ModelConfig) -> Result<ModelConfig, Failure> {
    let mut c = base;
    if let Some(mode) = cfg.resolve("mode", flags.mode)? {
        c.mode = mode;
    }
    if let Some(tw) = cfg.resolve("tw", flags.tw)? {
        c.window.window = tw;
    }
    if let Some(ss) = cfg.resolve("ss", flags.ss)? {
        c.window.stride = ss;
    }
    if let Some(tx) = cfg.resolve("tx", flags.tx)? {
        c.max_input = tx;
    }
    if let Some(ty) = cfg.resolve("ty", flags.ty)? {
        c.max_summary = ty;
    }
    if let Some(k) = cfg.resolve("k", flags.k)? {
        c.k = k;
    }
    if let Some(d) = cfg.resolve("d", flags.d)? {
        c.d = d;
    }
    if c.mode == Mode::Stan {
        c.window = WindowSpec {
            window: c.max_input,
            stride: c.max_input,
        };
    }
    c.validate()?;
    Ok(c)
}

fn window_spec(flags: &ModelFlags, cfg: &ConfigFile) -> Result<WindowSpec, Failure> {
    let default = ModelConfig::default().window;
    let spec = WindowSpec {
        window: cfg.resolve("tw", flags.tw)?.unwrap_or(default.window),
        stride: cfg.resolve("ss", flags.ss)?.unwrap_or(default.stride),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn preprocess(args: &PreprocessArgs, cfg: &ConfigFile) -> Result<(), Failure> {
    let corpus_path = require_file(cfg.path("corpus", args.corpus.clone()), "--corpus")?;
    let out = cfg.path("out", args.out.clone());
    let stats_path = cfg.path("stats", args.stats.clone());
    if out.is_none() && stats_path.is_none() {
        return Err(usage("nothing to do: give --out and/or --stats"));
    }
    for p in out.iter().chain(&stats_path) {
        if same_file(p, &corpus_path) {
            return Err(usage(format!("refusing to overwrite the input corpus {}", p.display())));
        }
    }
    let text = std::fs::read_to_string(&corpus_path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", corpus_path.display())))?;
    let pairs = parse_corpus(text.as_bytes(), &corpus_path)?;
    if pairs.is_empty() {
        return Err(Failure::Runtime(format!("{} has no records", corpus_path.display())));
    }

    if let Some(path) = &stats_path {
        let stats = CorpusStats::from_corpus(&pairs)?;
        let value = json!({
            "documents": pairs.len(),
            "majority_doc_len": stats.majority_doc_len,
            "majority_sum_len": stats.majority_sum_len,
        });
        let mut body = serde_json::to_string_pretty(&value).expect("json value");
        body.push('\n');
        write(path, body.as_bytes())?;
        log::info!(
            "{} documents: majority lengths {} (document), {} (summary)",
            pairs.len(),
            stats.majority_doc_len,
            stats.majority_sum_len
        );
    }

    if let Some(path) = &out {
        let mode = cfg.resolve("mode", args.model.mode)?.unwrap_or(Mode::Dwm);
        if mode != Mode::Dwm {
            return Err(usage(format!("shift annotation (--out) needs dwm mode, not {mode}")));
        }
        let emb_path = require_file(cfg.path("embeddings", args.embeddings.clone()), "--embeddings")?;
        let vocab_size = cfg.resolve("vocab-size", args.vocab_size)?.unwrap_or(DEFAULT_VOCAB_SIZE);
        let (vocab, table) = load_embeddings(&emb_path, vocab_size)?;
        let spec = window_spec(&args.model, cfg)?;
        let mut body = String::new();
        let records = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        for ((i, line), pair) in records.zip(&pairs) {
            let at = |e: String| Failure::Runtime(format!("{}:{}: {e}", corpus_path.display(), i + 1));
            let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
            let annotated = annotate_pair(pair, spec, &vocab, &table).map_err(|e| at(e.to_string()))?;
            value["summary_shifted"] = json!(annotated.shifted_text());
            body.push_str(&value.to_string());
            body.push('\n');
        }
        write(path, body.as_bytes())?;
        log::info!("wrote {} shift-annotated records to {}", pairs.len(), path.display());
    }
    Ok(())
}

fn train_config(args: &TrainArgs, cfg: &ConfigFile) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: cfg.resolve("lr", args.lr)?.unwrap_or(d.learning_rate),
        batch_size: cfg.resolve("batch-size", args.batch_size)?.unwrap_or(d.batch_size),
        epochs: cfg.resolve("epochs", args.epochs)?.unwrap_or(d.epochs),
        clip_norm: cfg.resolve("clip", args.clip)?.unwrap_or(d.clip_norm),
        seed: cfg.resolve("seed", args.seed)?.unwrap_or(d.seed),
        beam: cfg.resolve("beam", args.beam)?.unwrap_or(d.beam),
        eval_every: cfg.resolve("eval-every", args.eval_every)?.unwrap_or(d.eval_every),
        ..d
    };
    config.validate()?;
    Ok(config)
}

/// `dir/name.ext` -> `dir/name.<tag>.ext`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

pub fn train(args: &TrainArgs, cfg: &ConfigFile) -> Result<(), Failure> {
    let corpus_path = require_file(cfg.path("corpus", args.corpus.clone()), "--corpus")?;
    let out = cfg
        .path("out", args.out.clone())
        .ok_or_else(|| usage("--out is required"))?;
    let log_path = cfg.path("log", args.log.clone()).unwrap_or_else(|| sibling(&out, "log").with_extension("csv"));
    let dev_path = match cfg.path("dev", args.dev.clone()) {
        Some(p) => Some(require_file(Some(p), "--dev")?),
        None => None,
    };
    let stats_path = match cfg.path("stats", args.stats.clone()) {
        Some(p) => Some(require_file(Some(p), "--stats")?),
        None => None,
    };
    let resume = match &args.resume {
        Some(p) => Some(require_file(Some(p.clone()), "--resume")?),
        None => None,
    };
    let config = train_config(args, cfg)?;

    let pairs = load_corpus(&corpus_path)?;
    if pairs.is_empty() {
        return Err(Failure::Runtime(format!("{} has no records", corpus_path.display())));
    }
    let dev = match &dev_path {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    };

    let (mut trainer, mut log) = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(&path)?;
            let state = ckpt
                .training
                .ok_or_else(|| usage(format!("{} has no optimizer state to resume from", path.display())))?;
            if let Some(mode) = cfg.resolve("mode", args.model.mode)? {
                if mode != ckpt.model.config.mode {
                    return Err(usage(format!(
                        "checkpoint was trained in {} mode, not {mode}",
                        ckpt.model.config.mode
                    )));
                }
            }
            let log = match std::fs::read_to_string(&log_path) {
                Ok(text) if text.starts_with(LOG_HEADER) => text,
                _ => format!("{LOG_HEADER}\n"),
            };
            log::info!("resuming after epoch {} (step {})", state.epoch, state.adam.step);
            (Trainer::resume(ckpt.model, state.adam, state.epoch), log)
        }
        None => {
            let emb_path = require_file(cfg.path("embeddings", args.embeddings.clone()), "--embeddings")?;
            let vocab_size = cfg.resolve("vocab-size", args.vocab_size)?.unwrap_or(DEFAULT_VOCAB_SIZE);
            let (vocab, table) = load_embeddings(&emb_path, vocab_size)?;
            let mut base = ModelConfig::default();
            if let Some(h) = cfg.resolve("hidden", args.hidden)? {
                base.hidden = h;
            }
            let flag = args.train_embeddings.then_some(true);
            base.train_embeddings = cfg.resolve("train-embeddings", flag)?.unwrap_or(false);
            base.stats = Some(match &stats_path {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<CorpusStats>(&text)
                        .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?
                }
                None => CorpusStats::from_corpus(&pairs)?,
            });
            let model_cfg = model_config(&args.model, cfg, base)?;
            log::info!(
                "{} model, vocabulary {}, d_emb {}, hidden {}",
                model_cfg.mode,
                vocab.len(),
                table.dim(),
                model_cfg.hidden
            );
            (Trainer::new(Model::new(model_cfg, vocab, table, config.seed)?), format!("{LOG_HEADER}\n"))
        }
    };

    let examples = prepare_corpus(&trainer.model, &pairs)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", corpus_path.display())))?;
    let best_path = sibling(&out, "best");
    for _ in 0..config.epochs {
        let record = trainer.epoch(&examples, &dev, &config)?;
        log.push_str(&record.log_line());
        log.push('\n');
        write(&log_path, log.as_bytes())?;
        let ckpt = Checkpoint {
            model: trainer.model.clone(),
            training: Some(TrainingState {
                adam: trainer.adam.clone(),
                epoch: trainer.epoch,
            }),
        };
        write(&out, &checkpoint::encode(&ckpt))?;
        if let Some((epoch, score, model)) = &trainer.best {
            if *epoch == trainer.epoch {
                log::info!("new best dev ROUGE-L {score:.4} at epoch {epoch}");
                let best = Checkpoint {
                    model: model.clone(),
                    training: None,
                };
                write(&best_path, &checkpoint::encode(&best))?;
            }
        }
    }
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if path == Path::new("-") {
        let mut text = String::new();
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| Failure::Runtime(format!("standard input: {e}")))?;
        return Ok(text);
    }
    if !path.is_file() {
        return Err(usage(format!("--input: {} does not exist", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: Option<PathBuf>, flags: &ModelFlags, cfg: &ConfigFile) -> Result<Model, Failure> {
    let path = require_file(path, "--checkpoint")?;
    let mut model = checkpoint::load(&path)?.model;
    if let Some(mode) = cfg.resolve("mode", flags.mode)? {
        if mode != model.config.mode {
            return Err(usage(format!(
                "checkpoint {} was trained in {} mode, not {mode}",
                path.display(),
                model.config.mode
            )));
        }
    }
    model.config = model_config(flags, cfg, model.config.clone())?;
    Ok(model)
}

pub fn summarize(args: &SummarizeArgs, cfg: &ConfigFile) -> Result<(), Failure> {
    let text = read_input(&args.input)?;
    let model = load_model(cfg.path("checkpoint", args.checkpoint.clone()), &args.model, cfg)?;
    let doc = Document::from_text(&text);
    if doc.is_empty() {
        return Err(Failure::Runtime("input has no tokens".into()));
    }
    let beam = cfg.resolve("beam", args.beam)?.unwrap_or(DEFAULT_BEAM);
    let summary = inference::summarize(&model, &doc, beam)?;
    println!("{}", render(&summary, args.render));
    if let Some(path) = &args.trace {
        write(path, trace_jsonl(&summary).as_bytes())?;
    }
    log::info!(
        "{} input tokens over {} window(s); visited {:?}",
        doc.len(),
        summary.num_windows,
        summary.windows_visited()
    );
    if summary.output_truncated {
        log::warn!("summary reached T_y = {} without </s>", model.config.max_summary);
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs, cfg: &ConfigFile) -> Result<(), Failure> {
    let corpus_path = require_file(cfg.path("corpus", args.corpus.clone()), "--corpus")?;
    let ckpt = cfg.path("checkpoint", args.checkpoint.clone());
    if ckpt.is_none() && args.baseline.is_none() {
        return Err(usage("give --checkpoint and/or --baseline"));
    }
    let model = match ckpt {
        Some(p) => Some(load_model(Some(p), &ModelFlags::default(), cfg)?),
        None => None,
    };
    let pairs: Vec<SummaryPair> = load_corpus(&corpus_path)?;
    let mut rows = Vec::new();
    if args.baseline == Some(Baseline::Lead3) {
        rows.push(evaluate_corpus(&Lead3, &pairs));
    }
    if let Some(model) = &model {
        let beam = cfg.resolve("beam", args.beam)?.unwrap_or(DEFAULT_BEAM);
        rows.push(evaluate_corpus(&ModelSummarizer { model, beam }, &pairs));
    }
    for r in &rows {
        if r.failures > 0 {
            log::warn!("{}: {} documents failed to decode and were skipped", r.system, r.failures);
        }
    }
    print!("{}", format_table(&rows));
    if let Some(path) = &args.json {
        let mut body = serde_json::to_string_pretty(&rows).expect("scores serialize");
        body.push('\n');
        write(path, body.as_bytes())?;
    }
    Ok(())
}

fn jsonl(pairs: &[SummaryPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let record = json!({
            "document": p.document.tokens.join(" "),
            "summary": p.summary.tokens.join(" "),
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let corpus = HeadlineCorpus {
        headline_words: args.headline_words,
        filler_words: args.filler_words,
        sentence_words: args.sentence_words,
        window: WindowSpec {
            window: args.tw,
            stride: args.ss,
        },
    };
    corpus.validate()?;
    let dir = &args.out_dir;
    for (i, (name, n)) in [("train", args.train), ("dev", args.dev), ("test", args.test)].into_iter().enumerate() {
        let pairs = corpus.generate(n, args.windows, args.seed.wrapping_add(i as u64))?;
        write(&dir.join(format!("{name}.jsonl")), jsonl(&pairs).as_bytes())?;
    }
    let (vocab, table) = random_embeddings(&corpus.words(), args.dim, args.seed)?;
    write(&dir.join("embeddings.txt"), embeddings_text(&vocab, &table).as_bytes())?;

    let summary_len = args.windows * (args.sentence_words + 2);
    let conf = format!(
        "# synthetic headline corpus\n\
         mode = dwm\ntw = {}\nss = {}\ntx = {}\nty = {}\nhidden = 16\n\
         corpus = train.jsonl\ndev = dev.jsonl\nembeddings = embeddings.txt\n\
         epochs = 60\nbatch-size = 5\nbeam = 4\n",
        args.tw,
        args.ss,
        corpus.doc_len(args.windows),
        2 * summary_len,
    );
    write(&dir.join("run.conf"), conf.as_bytes())?;
    log::info!("wrote synthetic corpus to {}", dir.display());
    Ok(())
}
