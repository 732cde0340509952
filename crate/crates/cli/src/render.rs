//! Window-annotated rendering of generated summaries.

use winsum::inference::{Summary, TraceEntry};

use crate::Render;

const COLORS: [&str; 6] = ["31", "32", "33", "34", "35", "36"];

pub fn render(summary: &Summary, style: Render) -> String {
    let tokens: Vec<&TraceEntry> = summary.trace.iter().filter(|e| !e.shift).collect();
    match style {
        Render::Plain => summary.text(),
        Render::Tags => {
            let mut parts = Vec::new();
            let mut current = 0;
            for e in tokens {
                if e.window != current {
                    parts.push(format!("[w{}]", e.window));
                    current = e.window;
                }
                parts.push(e.token.clone());
            }
            parts.join(" ")
        }
        Render::Color => tokens
            .iter()
            .map(|e| format!("\x1b[{}m{}\x1b[0m", COLORS[(e.window - 1) % COLORS.len()], e.token))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// One JSON object per emitted token, shifts included.
pub fn trace_jsonl(summary: &Summary) -> String {
    let mut out = String::new();
    for e in &summary.trace {
        out.push_str(&serde_json::to_string(e).expect("trace entries serialize"));
        out.push('\n');
    }
    out
}
