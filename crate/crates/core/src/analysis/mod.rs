//! Code metrics and evaluation statistics.

mod breakdown;
mod metrics;
mod passk;
mod similarity;

pub use breakdown::{breakdown, Bin, BreakdownError, BreakdownFactor, BreakdownPoint, BREAKDOWN_BINS};
pub use metrics::{compute_metrics, dedent, CodeMetrics, MetricsError};
pub use passk::{mean_pass_at_k, pass_at_k, pass_at_k_exact, PassAtKError};
pub use similarity::{bleu, jaccard, BleuError, BLEU_MAX_ORDER};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pipeline::EvalExample;
use crate::python::lexer;

/// BLEU over code tokens of two Python snippets.
pub fn code_bleu(candidate: &str, reference: &str) -> Result<f64, AnalysisError> {
    let cand = lexer::token_texts(candidate).map_err(MetricsError::from)?;
    let refr = lexer::token_texts(reference).map_err(MetricsError::from)?;
    Ok(bleu(&cand, &refr)?)
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Bleu(#[from] BleuError),
    #[error(transparent)]
    PassAtK(#[from] PassAtKError),
    #[error(transparent)]
    Breakdown(#[from] BreakdownError),
    #[error("example `{0}` has no results")]
    MissingResults(String),
}

/// Samples drawn and samples passing for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub n: u64,
    pub c: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub model_id: String,
    pub per_example: Vec<ExampleScore>,
    pub pass_at_k: BTreeMap<u64, f64>,
    #[serde(default)]
    pub breakdowns: BTreeMap<BreakdownFactor, Vec<Bin>>,
}

impl PassReport {
    /// Scores `per_example` at every k in `k_list`.
    pub fn from_scores(model_id: &str, per_example: Vec<ExampleScore>, k_list: &[u64]) -> Result<Self, PassAtKError> {
        let pairs: Vec<(u64, u64)> = per_example.iter().map(|s| (s.n, s.c)).collect();
        let mut pass_at_k = BTreeMap::new();
        for &k in k_list {
            pass_at_k.insert(k, mean_pass_at_k(&pairs, k)?);
        }
        Ok(PassReport { model_id: model_id.to_string(), per_example, pass_at_k, breakdowns: BTreeMap::new() })
    }

    /// Per-example unbiased pass@1 (`c / n`).
    pub fn pass_at_1_by_example(&self) -> BTreeMap<String, f64> {
        self.per_example
            .iter()
            .map(|s| (s.example_id.clone(), if s.n == 0 { 0.0 } else { s.c as f64 / s.n as f64 }))
            .collect()
    }

    /// Table with one row per model and one percentage column per k.
    pub fn render_table(reports: &[PassReport]) -> String {
        let ks: Vec<u64> = reports
            .iter()
            .flat_map(|r| r.pass_at_k.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = String::from("Model");
        for k in &ks {
            let _ = write!(out, "\tPass@{k}");
        }
        out.push('\n');
        for r in reports {
            out.push_str(&r.model_id);
            for k in &ks {
                match r.pass_at_k.get(k) {
                    Some(v) => {
                        let _ = write!(out, "\t{:.2}", v * 100.0);
                    }
                    None => out.push_str("\t--"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Metrics of an emitted example's target function and of the whole
/// assembled program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub target: CodeMetrics,
    pub context_tokens: usize,
    pub full: CodeMetrics,
    /// Number of assert statements over all test sets.
    pub test_cases: usize,
}

impl ExampleMetrics {
    pub fn factor(&self, factor: BreakdownFactor) -> f64 {
        match factor {
            BreakdownFactor::TargetLength => self.target.code_tokens as f64,
            BreakdownFactor::ContextLength => self.context_tokens as f64,
            BreakdownFactor::FunctionCalls => self.target.function_calls_in_target as f64,
            BreakdownFactor::ImportClass => {
                if !self.full.external_imports.is_empty() {
                    2.0
                } else if !self.full.stdlib_imports.is_empty() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Flattens the numbers into string metadata entries.
    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("target_code_tokens".into(), self.target.code_tokens.to_string());
        m.insert("target_ast_depth".into(), self.target.ast_depth.to_string());
        m.insert("target_variables".into(), self.target.variables.len().to_string());
        m.insert("target_function_calls".into(), self.target.function_calls_in_target.to_string());
        m.insert("context_code_tokens".into(), self.context_tokens.to_string());
        m.insert("example_code_tokens".into(), self.full.code_tokens.to_string());
        m.insert("example_ast_depth".into(), self.full.ast_depth.to_string());
        m.insert("example_variables".into(), self.full.variables.len().to_string());
        m.insert("stdlib_imports".into(), self.full.stdlib_imports.iter().cloned().collect::<Vec<_>>().join(","));
        m.insert("external_imports".into(), self.full.external_imports.iter().cloned().collect::<Vec<_>>().join(","));
        m.insert("test_cases".into(), self.test_cases.to_string());
        m
    }
}

/// Computes [`ExampleMetrics`] for an emitted example.
pub fn example_metrics(example: &EvalExample) -> Result<ExampleMetrics, AnalysisError> {
    let function = dedent(&format!("{}{}", example.function_header, example.target));
    let target = compute_metrics(&function, None)?;
    let program = example.assemble();
    let full = compute_metrics(&program, None)?;
    let context_tokens = full.code_tokens.saturating_sub(lexer::tokenize(&example.target).map_err(MetricsError::from)?.len());
    let test_cases = example
        .test_sets
        .iter()
        .map(|t| crate::python::syntax::count_asserts(&crate::python::syntax::parse(&t.code)))
        .sum();
    Ok(ExampleMetrics { target, context_tokens, full, test_cases })
}

/// Breakdown of per-example pass@1 by `factor`.
pub fn breakdown_by_factor(
    metrics: &BTreeMap<String, ExampleMetrics>,
    pass_at_1: &BTreeMap<String, f64>,
    factor: BreakdownFactor,
) -> Result<Vec<Bin>, AnalysisError> {
    let mut points = Vec::with_capacity(metrics.len());
    for (id, m) in metrics {
        let p = pass_at_1.get(id).ok_or_else(|| AnalysisError::MissingResults(id.clone()))?;
        points.push(BreakdownPoint { example_id: id.clone(), value: m.factor(factor), pass_at_1: *p });
    }
    Ok(breakdown(&points)?)
}

/// Tab-separated rendering of breakdown bins, one row per bin.
pub fn render_breakdowns(breakdowns: &BTreeMap<BreakdownFactor, Vec<Bin>>) -> String {
    let mut out = String::from("factor\tbin\tmin\tmax\tsize\tmean_pass@1\n");
    for (factor, bins) in breakdowns {
        for (i, b) in bins.iter().enumerate() {
            let _ = writeln!(out, "{factor}\t{}\t{}\t{}\t{}\t{:.4}", i + 1, b.min, b.max, b.size, b.mean_pass_at_1);
        }
    }
    out
}
