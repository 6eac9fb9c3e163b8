use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::example::{check_test_code, split_slot, Instruction, SlotSplit, TestOrigin, TestSet};
use super::templates::Template;
use crate::analysis::{code_bleu, dedent};
use crate::corpus::SourceFragment;
use crate::executor::{render_reports, Environment, ExecStatus, ExecutionJob, ExecutionReport, Executor};
use crate::llm::{extract_code_blocks, ChatModel, ChatRequest, GatewayError, Message, Sampling};
use crate::python::{self, lexer, syntax};

/// A model alias and the client answering for it.
#[derive(Clone)]
pub struct ModelHandle {
    pub model_id: String,
    pub client: Arc<dyn ChatModel>,
}

impl ModelHandle {
    pub fn new(model_id: impl Into<String>, client: Arc<dyn ChatModel>) -> Self {
        ModelHandle { model_id: model_id.into(), client }
    }

    fn ask(&self, messages: Vec<Message>, sampling: Sampling) -> Result<Vec<String>, StageFailure> {
        let req = ChatRequest::new(self.model_id.clone(), messages, sampling);
        match self.client.complete(&req) {
            Ok(resp) => Ok(resp.samples),
            Err(GatewayError::Refusal) => Err(StageFailure::Content("refusal".into())),
            Err(e) => Err(StageFailure::Infra(e.to_string())),
        }
    }
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle").field("model_id", &self.model_id).finish()
    }
}

/// Why a stage attempt did not produce a usable result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageFailure {
    /// The output was unusable; the caller may regenerate.
    Content(String),
    /// The gateway or the executor failed; the run must stop.
    Infra(String),
}

/// Thresholds applied to sandboxed candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// Minimum code-token BLEU of the candidate's target against the source
    /// body.
    pub min_target_bleu: f64,
    /// Minimum number of code tokens outside the target.
    pub min_context_tokens: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { min_target_bleu: 0.25, min_context_tokens: 30 }
    }
}

/// Sandboxed module returned by the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxOutput {
    pub code: String,
    /// Contents of a `requirements` block, if the model gave one.
    pub requirements: Option<Vec<String>>,
}

fn is_code_lang(lang: &str) -> bool {
    matches!(lang.to_ascii_lowercase().as_str(), "" | "python" | "py" | "python3")
}

/// Code blocks (python or untagged) of a response; the whole text when it
/// has no fence.
fn code_blocks(text: &str) -> Vec<String> {
    let blocks = extract_code_blocks(text);
    if blocks.is_empty() {
        return vec![text.to_string()];
    }
    blocks.into_iter().filter(|b| is_code_lang(&b.lang)).map(|b| with_newline(b.content)).collect()
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn first_sample(samples: Vec<String>) -> Result<String, StageFailure> {
    samples
        .into_iter()
        .next()
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| StageFailure::Content("refusal".into()))
}

/// Asks the model to turn the fragment into a self-contained module.
pub fn sandbox_fragment(
    frag: &SourceFragment,
    model: &ModelHandle,
    template: &Template,
    sampling: Sampling,
) -> Result<SandboxOutput, StageFailure> {
    let vars = BTreeMap::from([
        ("function_name", frag.function_name.as_str()),
        ("path", frag.path.as_str()),
        ("signature", frag.signature.as_str()),
        ("docstring", frag.docstring.as_str()),
        ("body", frag.body.as_str()),
        ("file_context", frag.file_context.as_str()),
    ]);
    let messages = template.render(&vars).map_err(|e| StageFailure::Infra(e.to_string()))?;
    let text = first_sample(model.ask(messages, sampling)?)?;
    let code = code_blocks(&text).into_iter().next().ok_or_else(|| StageFailure::Content("no_code".into()))?;
    let requirements = extract_code_blocks(&text).into_iter().find(|b| b.lang == "requirements").map(|b| {
        b.content
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
            .filter(|l| !l.is_empty())
            .collect()
    });
    Ok(SandboxOutput { code, requirements })
}

/// Source body without a leading docstring.
fn body_without_docstring(body: &str) -> String {
    let code = dedent(body);
    let Ok(tree) = syntax::parse_checked(&code) else {
        return code;
    };
    let root = tree.root_node();
    let first = root.named_child(0).filter(|n| {
        n.kind() == "expression_statement"
            && n.named_child_count() == 1
            && n.named_child(0).is_some_and(|c| c.kind() == "string" || c.kind() == "concatenated_string")
    });
    match first {
        Some(doc) => code[doc.end_byte()..].to_string(),
        None => code,
    }
}

/// Accepts a candidate, returning its split, or names the reason to
/// regenerate: `parse_error`, `target_absent`, `target_inline`,
/// `empty_target`, `target_dissimilar` or `context_too_short`.
pub fn validate_sandbox(candidate: &str, frag: &SourceFragment, thresholds: &ValidationConfig) -> Result<SlotSplit, String> {
    let split = split_slot(candidate, &frag.function_name).map_err(|e| e.reason().to_string())?;
    let mut reference = body_without_docstring(&frag.body);
    if lexer::tokenize(&reference).map_or(true, |t| t.is_empty()) {
        reference = frag.body.clone();
    }
    let similarity = code_bleu(&dedent(&split.target), &reference).unwrap_or(0.0);
    if similarity < thresholds.min_target_bleu {
        return Err("target_dissimilar".into());
    }
    let context_tokens = lexer::tokenize(&split.context).map_or(0, |t| t.len());
    if context_tokens < thresholds.min_context_tokens {
        return Err("context_too_short".into());
    }
    Ok(split)
}

/// Dependencies of a sandboxed module: the model's requirements block when
/// present, otherwise the distributions of its non-stdlib imports.
pub fn infer_dependencies(code: &str, declared: Option<&[String]>) -> Vec<String> {
    if let Some(d) = declared {
        return d.to_vec();
    }
    let tree = syntax::parse(code);
    syntax::imported_modules(code, &tree)
        .into_iter()
        .filter(|m| !python::is_stdlib_module(m))
        .map(|m| python::distribution_for_module(&m))
        .collect()
}

/// Asks for a test set and checks it statically.
pub fn generate_tests(
    code: &str,
    function_name: &str,
    model: &ModelHandle,
    template: &Template,
    sampling: Sampling,
) -> Result<TestSet, StageFailure> {
    let vars = BTreeMap::from([("function_name", function_name), ("code", code)]);
    let messages = template.render(&vars).map_err(|e| StageFailure::Infra(e.to_string()))?;
    let text = first_sample(model.ask(messages, sampling)?)?;
    let tests = code_blocks(&text).into_iter().next().unwrap_or_default();
    check_test_code(&tests, function_name).map_err(|e| StageFailure::Content(e.reason().to_string()))?;
    Ok(TestSet { name: "generated".into(), code: tests, origin: TestOrigin::Generated })
}

/// The program that is executed for a candidate: the split reassembled with
/// its ground truth (docstring removed).
pub fn assembled(split: &SlotSplit) -> String {
    let (range, _) = super::example::slot_range(&split.context).expect("split has a slot");
    format!("{}{}{}", &split.context[..range.start], split.target, &split.context[range.end..])
}

/// Execution settings shared by the stages that run code.
#[derive(Clone, Copy)]
pub struct ExecContext<'a> {
    pub executor: &'a Executor,
    pub env: &'a Environment,
    pub timeout: Duration,
}

impl ExecContext<'_> {
    /// Runs one set, retrying once on an infrastructure error.
    pub fn run(&self, program: &str, tests: &str) -> Result<ExecutionReport, StageFailure> {
        let mut job = ExecutionJob::new(program, tests, self.timeout);
        job.dependencies = self.env.requirements.clone();
        let mut report = self.executor.execute(&job, self.env);
        if report.status == ExecStatus::InfraError {
            log::warn!("infrastructure error, retrying once: {}", report.error.as_deref().unwrap_or(""));
            report = self.executor.execute(&job, self.env);
        }
        if report.status == ExecStatus::InfraError {
            return Err(StageFailure::Infra(report.error.unwrap_or_else(|| "infra_error".into())));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DebugOutcome {
    Success {
        code: String,
        split: SlotSplit,
        tests: String,
        /// Number of accepted rewrites before the tests passed.
        iterations: u32,
        executions: u32,
        history: Vec<String>,
    },
    Failure {
        last_report: ExecutionReport,
        executions: u32,
        history: Vec<String>,
    },
}

/// Settings of the execute-and-debug loop.
#[derive(Debug, Clone, Copy)]
pub struct DebugSettings {
    pub max_iter: u32,
    /// Minimum ratio of rewritten to previous code+tests length.
    pub shrink_guard: f64,
    pub sampling: Sampling,
}

/// Executes the candidate; while the tests fail, asks the model to rewrite
/// code and tests, for at most `max_iter` rewrites. Rejected rewrites use
/// up an iteration without being executed.
#[allow(clippy::too_many_arguments)]
pub fn debug_iterate(
    code: &str,
    split: &SlotSplit,
    tests: &str,
    function_name: &str,
    exec: ExecContext<'_>,
    model: &ModelHandle,
    template: &Template,
    settings: DebugSettings,
) -> Result<DebugOutcome, StageFailure> {
    let mut code = code.to_string();
    let mut split = split.clone();
    let mut tests = tests.to_string();
    let mut history = Vec::new();
    let mut report = exec.run(&assembled(&split), &tests)?;
    let mut executions = 1;
    history.push(format!("execution 0: {}", report.status));
    if report.passed() {
        return Ok(DebugOutcome::Success { code, split, tests, iterations: 0, executions, history });
    }
    for iteration in 1..=settings.max_iter {
        let rendered = render_reports([("generated", &report)]);
        let vars = BTreeMap::from([
            ("function_name", function_name),
            ("code", code.as_str()),
            ("tests", tests.as_str()),
            ("report", rendered.as_str()),
        ]);
        let messages = template.render(&vars).map_err(|e| StageFailure::Infra(e.to_string()))?;
        let text = match model.ask(messages, settings.sampling) {
            Ok(samples) => samples.into_iter().next().unwrap_or_default(),
            Err(StageFailure::Content(reason)) => {
                history.push(format!("rewrite {iteration}: rejected ({reason})"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let blocks = code_blocks(&text);
        let new_code = blocks.first().cloned().unwrap_or_default();
        let new_tests = blocks.get(1).cloned().unwrap_or_else(|| tests.clone());
        let new_split = match split_slot(&new_code, function_name) {
            Ok(s) => s,
            Err(e) => {
                history.push(format!("rewrite {iteration}: rejected ({})", e.reason()));
                continue;
            }
        };
        if let Err(e) = check_test_code(&new_tests, function_name) {
            history.push(format!("rewrite {iteration}: rejected ({})", e.reason()));
            continue;
        }
        let before = (code.len() + tests.len()) as f64;
        let after = (new_code.len() + new_tests.len()) as f64;
        if after < settings.shrink_guard * before {
            history.push(format!("rewrite {iteration}: rejected (shrunk)"));
            continue;
        }
        code = new_code;
        split = new_split;
        tests = new_tests;
        report = exec.run(&assembled(&split), &tests)?;
        executions += 1;
        history.push(format!("execution {iteration}: {}", report.status));
        if report.passed() {
            return Ok(DebugOutcome::Success { code, split, tests, iterations: iteration, executions, history });
        }
    }
    Ok(DebugOutcome::Failure { last_report: report, executions, history })
}

/// Reads `Functionality:`, `Inputs:` and `Outputs:` sections from a model
/// answer. Lines following a label up to the next label belong to it.
pub fn parse_instruction(text: &str) -> Instruction {
    let mut inst = Instruction::default();
    let mut current: Option<&mut String> = None;
    for line in text.lines() {
        let t = line.trim().trim_start_matches(['*', '-', '#', ' ']).trim_start();
        let labelled = [
            ("functionality:", 0usize),
            ("inputs:", 1),
            ("input:", 1),
            ("outputs:", 2),
            ("output:", 2),
        ]
        .iter()
        .find_map(|(label, idx)| {
            let lower = t.to_ascii_lowercase().replace("**", "");
            lower.starts_with(label).then(|| {
                let stripped = t.replace("**", "");
                (*idx, stripped[label.len()..].trim().to_string())
            })
        });
        match labelled {
            Some((idx, rest)) => {
                let field = match idx {
                    0 => &mut inst.functionality,
                    1 => &mut inst.inputs,
                    _ => &mut inst.outputs,
                };
                *field = rest;
                current = Some(field);
            }
            None => {
                if let Some(field) = current.as_deref_mut() {
                    let t = line.trim();
                    if t.is_empty() || t.starts_with("```") || t == "\"\"\"" {
                        continue;
                    }
                    if !field.is_empty() {
                        field.push(' ');
                    }
                    field.push_str(t);
                }
            }
        }
    }
    inst
}

/// Result of instruction generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionOutcome {
    pub instruction: Instruction,
    pub degraded: bool,
    pub attempts: u32,
}

const INSTRUCTION_REPROMPT: &str =
    "Your answer must contain all three labelled parts, each non-empty:\nFunctionality: ...\nInputs: ...\nOutputs: ...";

/// Inner text of a docstring literal, cleaned like `inspect.cleandoc`: the
/// first line is stripped and the rest dedented.
pub fn docstring_text(literal: &str) -> String {
    let s = literal.trim_start_matches(|c: char| c.is_ascii_alphabetic());
    let inner = ["\"\"\"", "'''", "\"", "'"]
        .iter()
        .find_map(|q| s.strip_prefix(q).and_then(|r| r.strip_suffix(q)))
        .unwrap_or(literal);
    let (first, rest) = inner.split_once('\n').unwrap_or((inner, ""));
    format!("{}\n{}", first.trim(), dedent(rest)).trim().to_string()
}

/// Asks for the three-part instruction, re-prompting once when a part is
/// missing. After two failures the original docstring stands in.
pub fn generate_instruction(
    code: &str,
    function_text: &str,
    function_name: &str,
    docstring: Option<&str>,
    model: &ModelHandle,
    template: &Template,
    sampling: Sampling,
) -> Result<InstructionOutcome, StageFailure> {
    let vars = BTreeMap::from([("function_name", function_name), ("code", code), ("function", function_text)]);
    let mut messages = template.render(&vars).map_err(|e| StageFailure::Infra(e.to_string()))?;
    for attempt in 1..=2 {
        match model.ask(messages.clone(), sampling) {
            Ok(samples) => {
                let text = samples.into_iter().next().unwrap_or_default();
                let inst = parse_instruction(&text);
                if inst.is_complete() {
                    return Ok(InstructionOutcome { instruction: inst, degraded: false, attempts: attempt });
                }
                messages.push(Message::assistant(text));
                messages.push(Message::user(INSTRUCTION_REPROMPT));
            }
            Err(StageFailure::Content(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let functionality = docstring
        .map(docstring_text)
        .filter(|d| !d.is_empty())
        .unwrap_or_else(|| format!("Complete the function {function_name}."));
    Ok(InstructionOutcome {
        instruction: Instruction { functionality, inputs: "Not specified.".into(), outputs: "Not specified.".into() },
        degraded: true,
        attempts: 2,
    })
}

/// Samples `k` extra test sets in one request and keeps the first that
/// passes the static check and the ground truth.
pub fn augment_tests(
    program: &str,
    function_name: &str,
    exec: ExecContext<'_>,
    model: &ModelHandle,
    template: &Template,
    sampling: Sampling,
) -> Result<Option<TestSet>, StageFailure> {
    if sampling.n == 0 {
        return Ok(None);
    }
    let vars = BTreeMap::from([("function_name", function_name), ("code", program)]);
    let messages = template.render(&vars).map_err(|e| StageFailure::Infra(e.to_string()))?;
    let samples = match model.ask(messages, sampling) {
        Ok(s) => s,
        Err(StageFailure::Content(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    for sample in samples {
        let Some(tests) = code_blocks(&sample).into_iter().next() else { continue };
        if check_test_code(&tests, function_name).is_err() {
            continue;
        }
        if exec.run(program, &tests)?.passed() {
            return Ok(Some(TestSet {
                name: "augmented".into(),
                code: tests,
                origin: TestOrigin::Augmented { model_id: model.model_id.clone() },
            }));
        }
    }
    Ok(None)
}
