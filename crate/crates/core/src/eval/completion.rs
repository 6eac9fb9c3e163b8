use serde::{Deserialize, Serialize};

use crate::llm::extract_code_blocks;
use crate::pipeline::{target_start, EvalExample};
use crate::python::syntax;

/// Body to place in the slot, or a refusal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum Extraction {
    Body(String),
    Refusal,
}

/// Turns a raw completion into the text that fills the example's slot.
///
/// The code is the first fenced block if any, else the whole completion.
/// When it defines the target function, the body after its docstring is
/// taken; otherwise the code is treated as a bare body. Either way the body
/// is re-indented to the slot. No fence, no target definition and no
/// parseable code is a refusal.
pub fn extract_completion(completion: &str, example: &EvalExample) -> Extraction {
    let blocks = extract_code_blocks(completion);
    let fenced = !blocks.is_empty();
    let code = match blocks.into_iter().next() {
        Some(b) => b.content,
        None => completion.to_string(),
    };
    if code.trim().is_empty() {
        return Extraction::Refusal;
    }
    let slot_indent = example.slot_indent();
    let tree = syntax::parse(&code);
    if let Ok(site) = syntax::find_function_qualified(&code, &tree, example.qualified_name()) {
        let start = target_start(&code, &site);
        let end = site.body.end.max(start);
        let body = reindent(&code[start..end], &site.body_indent, &slot_indent);
        return Extraction::Body(ensure_newline(body));
    }
    if !fenced && syntax::parse_checked(&code).is_err() {
        return Extraction::Refusal;
    }
    let from = code
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l[..l.len() - l.trim_start().len()].to_string())
        .unwrap_or_default();
    let trimmed = code.trim_start_matches(|c| c == '\n' || c == '\r');
    Extraction::Body(ensure_newline(reindent(trimmed, &from, &slot_indent)))
}

/// Replaces the `from` prefix with `to` on every line that starts with it.
/// Other lines (continuations of multi-line strings, blank lines) are kept.
pub fn reindent(text: &str, from: &str, to: &str) -> String {
    if from == to {
        return text.to_string();
    }
    text.split_inclusive('\n')
        .map(|line| match line.strip_prefix(from) {
            Some(rest) if !line.trim().is_empty() => format!("{to}{rest}"),
            _ => line.to_string(),
        })
        .collect()
}

fn ensure_newline(mut s: String) -> String {
    if !s.is_empty() && !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

/// The program executed for a completion.
pub fn assemble_completion(example: &EvalExample, extraction: &Extraction) -> Option<String> {
    match extraction {
        Extraction::Body(body) => Some(example.fill_slot(body)),
        Extraction::Refusal => None,
    }
}
