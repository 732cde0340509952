use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use winsum::corpus::{load_corpus, Document};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/tiny")
}

fn winsum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winsum"))
        .args(args)
        .env_remove("WINSUM_CONFIG")
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn winsum")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A DWM model trained on the shipped corpus, shared by the tests below.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("trained");
        let conf = data_dir().join("run.conf");
        ok(&winsum(&[
            "--config",
            s(&conf),
            "train",
            "--out",
            s(&dir.join("model.ckpt")),
            "--epochs",
            "40",
        ]));
        dir
    })
}

/// A shipped test document repeated `copies` times.
fn long_document(copies: usize) -> String {
    let pairs = load_corpus(data_dir().join("test.jsonl")).unwrap();
    let text = pairs[0].document.tokens.join(" ");
    vec![text; copies].join(" ")
}

#[test]
fn shipped_corpus_is_the_synth_output() {
    let dir = scratch("synth");
    ok(&winsum(&["synth", "--out-dir", s(&dir)]));
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl", "embeddings.txt", "run.conf"] {
        let fresh = std::fs::read(dir.join(name)).unwrap();
        let shipped = std::fs::read(data_dir().join(name)).unwrap();
        assert!(fresh == shipped, "{name} differs from the shipped copy");
    }
}

#[test]
fn shipped_corpus_token_counts() {
    let pairs = load_corpus(data_dir().join("train.jsonl")).unwrap();
    assert_eq!(pairs.len(), 50);
    assert_eq!(pairs.iter().map(|p| p.document.len()).sum::<usize>(), 1200);
    assert_eq!(pairs.iter().map(|p| p.summary.len()).sum::<usize>(), 400);
    assert!(pairs.iter().all(|p| p.document.sentences.len() == 6));
}

/// Smallest observed length `v` with at least 90% of lengths `<= v`.
fn quantile_oracle(lengths: &[usize]) -> usize {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    *sorted
        .iter()
        .find(|&&v| 10 * lengths.iter().filter(|&&l| l <= v).count() >= 9 * lengths.len())
        .unwrap()
}

#[test]
fn preprocess_annotates_and_is_idempotent() {
    let dir = scratch("preprocess");
    let corpus = data_dir().join("train.jsonl");
    let before = std::fs::read(&corpus).unwrap();
    let emb = data_dir().join("embeddings.txt");
    let run = |tag: &str| {
        let out = dir.join(format!("shifted.{tag}.jsonl"));
        let stats = dir.join(format!("stats.{tag}.json"));
        ok(&winsum(&[
            "preprocess",
            "--corpus",
            s(&corpus),
            "--embeddings",
            s(&emb),
            "--tw",
            "12",
            "--ss",
            "12",
            "--out",
            s(&out),
            "--stats",
            s(&stats),
        ]));
        (std::fs::read(out).unwrap(), std::fs::read(stats).unwrap())
    };
    let first = run("a");
    let second = run("b");
    assert_eq!(first, second, "rerun is not byte-identical");
    assert_eq!(std::fs::read(&corpus).unwrap(), before, "input corpus was modified");

    let text = String::from_utf8(first.0).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let shifted = v["summary_shifted"].as_str().expect("summary_shifted present");
        let tokens: Vec<&str> = shifted.split(' ').collect();
        assert_eq!(tokens.iter().filter(|t| **t == "-->").count(), 1);
        assert_eq!(tokens[4], "-->", "{shifted}");
    }

    let pairs = load_corpus(&corpus).unwrap();
    let stats: serde_json::Value = serde_json::from_slice(&first.1).unwrap();
    let docs: Vec<usize> = pairs.iter().map(|p| p.document.len()).collect();
    let sums: Vec<usize> = pairs.iter().map(|p| p.summary.len()).collect();
    assert_eq!(stats["majority_doc_len"], quantile_oracle(&docs));
    assert_eq!(stats["majority_sum_len"], quantile_oracle(&sums));
    assert_eq!(stats["documents"], 50);
}

#[test]
fn preprocess_reports_file_and_line() {
    let dir = scratch("bad-corpus");
    let bad = dir.join("bad.jsonl");
    std::fs::write(&bad, "{\"document\":\"a .\",\"summary\":\"a .\"}\n\n{\"document\":\"b .\"}\n").unwrap();
    let out = winsum(&["preprocess", "--corpus", s(&bad), "--stats", s(&dir.join("st.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl:3: missing string field \"summary\""), "{err}");
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = scratch("repro");
    let conf = data_dir().join("run.conf");
    let train = |name: &str, epochs: &str, extra: &[&str]| {
        let out = dir.join(name);
        let mut args = vec!["--config", s(&conf), "train", "--out", s(&out), "--epochs", epochs, "--seed", "5"];
        args.extend_from_slice(extra);
        ok(&winsum(&args));
        out
    };
    let a = train("a.ckpt", "2", &[]);
    let b = train("b.ckpt", "2", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // 50 records in batches of 5: 10 optimizer steps per epoch
    let a_log = dir.join("a.log.csv");
    ok(&winsum(&[
        "--config",
        s(&conf),
        "train",
        "--out",
        s(&a),
        "--resume",
        s(&a),
        "--epochs",
        "2",
        "--seed",
        "5",
    ]));
    let log = std::fs::read_to_string(&a_log).unwrap();
    let rows: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(log.lines().next(), Some("epoch,step,loss,dev_rouge_l"));
    assert_eq!(rows.len(), 4);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        assert_eq!(row[1], (10 * (i + 1)).to_string());
    }

    // resuming equals training straight through
    let c = train("c.ckpt", "4", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn summarize_short_input_uses_one_window() {
    let dir = trained();
    let input = dir.join("short.txt");
    std::fs::write(&input, "h1 h2 h3 . f1 f2 f3 .").unwrap();
    let trace = dir.join("short.trace.jsonl");
    let stdout = ok(&winsum(&[
        "summarize",
        "--checkpoint",
        s(&dir.join("model.ckpt")),
        "--input",
        s(&input),
        "--trace",
        s(&trace),
    ]));
    assert!(!stdout.trim().is_empty());
    let text = std::fs::read_to_string(trace).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["window"], 1);
    }
}

#[test]
fn summarize_long_input_under_dwm() {
    let dir = trained();
    let input = dir.join("long.txt");
    let text = long_document(550);
    assert!(Document::from_text(&text).len() >= 13_000);
    std::fs::write(&input, &text).unwrap();
    let trace = dir.join("long.trace.jsonl");
    let out = winsum(&[
        "summarize",
        "--checkpoint",
        s(&dir.join("model.ckpt")),
        "--input",
        s(&input),
        "--trace",
        s(&trace),
        "--render",
        "tags",
    ]);
    let stdout = ok(&out);
    assert!(stdout.contains("[w1]") && stdout.contains("[w2]"), "{stdout}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.contains("truncated"), "{stderr}");
    assert!(stderr.contains("over 1100 window(s)"), "{stderr}");
}

#[test]
fn stan_warns_about_truncation() {
    let dir = scratch("stan");
    let conf = data_dir().join("run.conf");
    let ckpt = dir.join("stan.ckpt");
    ok(&winsum(&[
        "--config", s(&conf), "train", "--mode", "stan", "--tx", "24", "--out", s(&ckpt), "--epochs", "1",
    ]));
    let input = dir.join("long.txt");
    std::fs::write(&input, long_document(10)).unwrap();
    let out = winsum(&["summarize", "--checkpoint", s(&ckpt), "--input", s(&input), "--mode", "stan"]);
    ok(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("truncated to T_x = 24"), "{stderr}");

    let out = winsum(&["summarize", "--checkpoint", s(&ckpt), "--input", s(&input), "--mode", "dwm"]);
    assert_eq!(out.status.code(), Some(2), "mode mismatch must be rejected");
}

#[test]
fn evaluate_lead3_without_checkpoint() {
    let dir = scratch("evaluate");
    let json = dir.join("scores.json");
    let corpus = data_dir().join("test.jsonl");
    let table = ok(&winsum(&["evaluate", "--baseline", "lead3", "--corpus", s(&corpus), "--json", s(&json)]));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let row = &rows[0];
    let line = table.lines().nth(1).unwrap();
    let cols: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(cols[0], "Lead-3");
    for (col, key) in [(1, "rouge_1"), (2, "rouge_2"), (3, "rouge_l")] {
        let f1 = row[key]["f1"].as_f64().unwrap();
        assert_eq!(cols[col], format!("{:.2}", 100.0 * f1));
    }
    assert_eq!(cols[4], row["documents"].to_string());
}

#[test]
fn evaluate_trained_checkpoint() {
    let dir = trained();
    let corpus = data_dir().join("test.jsonl");
    let table = ok(&winsum(&[
        "evaluate",
        "--checkpoint",
        s(&dir.join("model.ckpt")),
        "--baseline",
        "lead3",
        "--corpus",
        s(&corpus),
    ]));
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("DWM"));
}

#[test]
fn usage_errors_exit_2() {
    let out = winsum(&["evaluate", "--baseline", "lead3", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = winsum(&["evaluate", "--corpus", s(&data_dir().join("test.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = winsum(&["summarize", "--input", "x.txt"]);
    assert_eq!(out.status.code(), Some(2));
    let out = winsum(&["train", "--corpus", s(&data_dir().join("train.jsonl")), "--out", "/tmp/x.ckpt", "--tw", "5", "--ss", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_from_environment() {
    let dir = scratch("env-config");
    let conf = dir.join("eval.conf");
    std::fs::write(&conf, format!("corpus = {}\nbeam = 2\n", s(&data_dir().join("test.jsonl")))).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_winsum"))
        .args(["evaluate", "--baseline", "lead3"])
        .env("WINSUM_CONFIG", &conf)
        .output()
        .unwrap();
    assert!(ok(&out).starts_with("Model"));

    std::fs::write(&conf, "beam = 2\nwidth = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_winsum"))
        .args(["evaluate", "--baseline", "lead3"])
        .env("WINSUM_CONFIG", &conf)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.conf:2: unknown key `width`"));
}
