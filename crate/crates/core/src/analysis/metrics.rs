use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::python::{self, lexer, syntax};

/// Size and shape statistics of a piece of Python code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMetrics {
    pub code_tokens: usize,
    pub ast_depth: usize,
    pub variables: BTreeSet<String>,
    pub stdlib_imports: BTreeSet<String>,
    pub external_imports: BTreeSet<String>,
    pub function_calls_in_target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("code does not parse: {0}")]
    Syntax(#[from] syntax::SyntaxError),
    #[error("code does not tokenize: {0}")]
    Lex(#[from] lexer::LexError),
    #[error("target span {start}..{end} is outside the code ({len} bytes)")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
}

/// Computes metrics for `code`. Token count, tree depth and imports cover
/// the whole code; variables and calls are restricted to `target_span`
/// (the whole code when `None`).
pub fn compute_metrics(code: &str, target_span: Option<Range<usize>>) -> Result<CodeMetrics, MetricsError> {
    let span = target_span.unwrap_or(0..code.len());
    if span.start > span.end || span.end > code.len() {
        return Err(MetricsError::SpanOutOfBounds { start: span.start, end: span.end, len: code.len() });
    }
    let tree = syntax::parse_checked(code)?;
    let code_tokens = lexer::tokenize(code)?.len();
    let (stdlib_imports, external_imports) = syntax::imported_modules(code, &tree)
        .into_iter()
        .partition(|m| python::is_stdlib_module(m));
    let (variables, function_calls_in_target) = if span.is_empty() {
        (BTreeSet::new(), 0)
    } else {
        (syntax::bound_variables(code, &tree, &span), syntax::count_calls(&tree, &span))
    };
    Ok(CodeMetrics {
        code_tokens,
        ast_depth: syntax::tree_depth(&tree),
        variables,
        stdlib_imports,
        external_imports,
        function_calls_in_target,
    })
}

/// Removes the common leading indentation of all non-blank lines.
pub fn dedent(code: &str) -> String {
    let indent = code
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    let mut out = String::with_capacity(code.len());
    for line in code.split_inclusive('\n') {
        if line.trim().is_empty() {
            out.push_str(line.trim_start_matches([' ', '\t']));
        } else {
            out.push_str(&line[indent..]);
        }
    }
    out
}
