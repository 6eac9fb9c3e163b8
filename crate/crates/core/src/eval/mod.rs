//! Evaluation harness: prompts, sampling, execution, pass@k scoring and
//! the append-results refinement loop.

mod completion;
mod generator;
pub mod hygiene;
mod prompt;

pub use completion::{assemble_completion, extract_completion, reindent, Extraction};
pub use generator::{ChatGenerator, EmptyGenerator, FnGenerator, GenerationRequest, Generator, OracleGenerator};
pub use prompt::{build_prompt, build_prompt_with_tests, prompt_code, prompt_docstring, ELLIPSIS};

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{ExampleScore, PassAtKError, PassReport};
use crate::executor::{render_reports, ExecutionReport, EVALUATION_TIMEOUT, STDERR_TAIL_LINES};
use crate::llm::{GatewayError, Message, Sampling};
use crate::pipeline::{EvalExample, ExecContext, StageFailure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_samples: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub k_list: Vec<u64>,
    /// Revisions allowed after the first attempt in refinement runs.
    pub max_rounds: u32,
    pub include_tests_in_prompt: bool,
    /// Sample revisions greedily instead of at `temperature`.
    pub greedy_refinement: bool,
    /// Per-test-set timeout in seconds.
    pub timeout_secs: f64,
    /// Stderr lines shown per test set in refinement feedback.
    pub feedback_stderr_lines: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 20,
            temperature: 0.3,
            top_p: 0.95,
            k_list: vec![1, 2, 5, 10],
            max_rounds: 0,
            include_tests_in_prompt: false,
            greedy_refinement: false,
            timeout_secs: EVALUATION_TIMEOUT.as_secs_f64(),
            feedback_stderr_lines: STDERR_TAIL_LINES,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if self.k_list.is_empty() {
            return bad("k_list is empty".into());
        }
        if let Some(k) = self.k_list.iter().find(|&&k| k == 0 || k > u64::from(self.n_samples)) {
            return bad(format!("k = {k} is outside 1..={}", self.n_samples));
        }
        if !(0.0..=2.0).contains(&self.temperature) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("bad sampling parameters ({}, {})", self.temperature, self.top_p));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("infrastructure failure on `{example}`: {message}")]
    Infrastructure { example: String, message: String },
    #[error(transparent)]
    PassAtK(#[from] PassAtKError),
    #[error("no data")]
    NoData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub test_set: String,
    pub report: ExecutionReport,
}

/// One completion and how it fared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub example_id: String,
    pub model_id: String,
    /// 0 for the first attempt, `r` for the r-th revision.
    pub round: u32,
    /// Index among the samples drawn for the same prompt.
    pub sample: u32,
    pub prompt_hash: String,
    pub completion: String,
    pub reports: Vec<SetReport>,
    pub verdict: Verdict,
    /// No code could be extracted (or the generator declined).
    #[serde(default)]
    pub refusal: bool,
}

impl GenerationSample {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Hex SHA-256 over the JSON of the prompt messages.
pub fn prompt_hash(messages: &[Message]) -> String {
    let json = serde_json::to_string(messages).expect("messages serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// First-round messages for an example.
pub fn initial_messages(example: &EvalExample, cfg: &EvalConfig) -> Vec<Message> {
    let prompt = if cfg.include_tests_in_prompt { build_prompt_with_tests(example) } else { build_prompt(example) };
    vec![Message::user(prompt)]
}

fn generate(gen: &dyn Generator, req: &GenerationRequest) -> Result<Option<Vec<String>>, EvalError> {
    let mut last = None;
    for _ in 0..2 {
        match gen.generate(req) {
            Ok(samples) => return Ok(Some(samples)),
            Err(GatewayError::Refusal) => return Ok(None),
            Err(e) => {
                log::warn!("{}: generation failed: {e}", req.example.id);
                last = Some(e);
            }
        }
    }
    Err(EvalError::Infrastructure {
        example: req.example.id.clone(),
        message: last.map(|e| e.to_string()).unwrap_or_default(),
    })
}

/// Executes one completion against every test set of the example.
pub fn score_completion(
    example: &EvalExample,
    completion: &str,
    exec: &ExecContext,
) -> Result<(Vec<SetReport>, Verdict, bool), EvalError> {
    let extraction = extract_completion(completion, example);
    let Some(program) = assemble_completion(example, &extraction) else {
        return Ok((Vec::new(), Verdict::Fail, true));
    };
    let mut reports = Vec::with_capacity(example.test_sets.len());
    for set in &example.test_sets {
        let report = exec.run(&program, &set.code).map_err(|e| match e {
            StageFailure::Infra(message) | StageFailure::Content(message) => {
                EvalError::Infrastructure { example: example.id.clone(), message }
            }
        })?;
        reports.push(SetReport { test_set: set.name.clone(), report: deterministic(report) });
    }
    let pass = !reports.is_empty() && reports.iter().all(|r| r.report.passed());
    Ok((reports, if pass { Verdict::Pass } else { Verdict::Fail }, false))
}

/// Wall-clock time differs between runs; records keep everything else.
fn deterministic(mut report: ExecutionReport) -> ExecutionReport {
    report.duration = 0.0;
    report
}

fn sample_record(
    example: &EvalExample,
    model_id: &str,
    round: u32,
    index: u32,
    hash: &str,
    completion: Option<&str>,
    exec: &ExecContext,
) -> Result<GenerationSample, EvalError> {
    let (reports, verdict, refusal) = match completion {
        Some(c) => score_completion(example, c, exec)?,
        None => (Vec::new(), Verdict::Fail, true),
    };
    Ok(GenerationSample {
        example_id: example.id.clone(),
        model_id: model_id.to_string(),
        round,
        sample: index,
        prompt_hash: hash.to_string(),
        completion: completion.unwrap_or_default().to_string(),
        reports,
        verdict,
        refusal,
    })
}

/// Result of [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: PassReport,
    /// Every sample, grouped by example in dataset order.
    pub samples: Vec<GenerationSample>,
}

/// Draws `n_samples` completions per example, executes each against every
/// test set and scores pass@k over `k_list`.
pub fn evaluate(
    dataset: &[EvalExample],
    generator: &dyn Generator,
    cfg: &EvalConfig,
    exec: &ExecContext,
) -> Result<Evaluation, EvalError> {
    cfg.validate()?;
    let sampling = Sampling::new(cfg.temperature, cfg.top_p, cfg.n_samples);
    let per_example: Vec<Vec<GenerationSample>> = dataset
        .par_iter()
        .map(|ex| {
            let messages = initial_messages(ex, cfg);
            let hash = prompt_hash(&messages);
            let req = GenerationRequest { example: ex, messages: &messages, sampling, round: 0 };
            let completions = generate(generator, &req)?;
            (0..cfg.n_samples)
                .into_par_iter()
                .map(|i| {
                    let completion = completions.as_ref().map(|c| c.get(i as usize).map_or("", String::as_str));
                    sample_record(ex, generator.model_id(), 0, i, &hash, completion, exec)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let scores = dataset
        .iter()
        .zip(&per_example)
        .map(|(ex, samples)| ExampleScore {
            example_id: ex.id.clone(),
            n: samples.len() as u64,
            c: samples.iter().filter(|s| s.passed()).count() as u64,
        })
        .collect();
    let report = PassReport::from_scores(generator.model_id(), scores, &cfg.k_list)?;
    Ok(Evaluation { report, samples: per_example.into_iter().flatten().collect() })
}

/// Per-set feedback as appended to refinement prompts: status, first failing
/// assert, error and the last lines of stderr, with any text copied from
/// the tests withheld.
pub fn render_feedback(example: &EvalExample, reports: &[SetReport], stderr_lines: usize) -> String {
    let tests = example.test_codes();
    let shown: Vec<(String, ExecutionReport)> = reports
        .iter()
        .map(|r| {
            let mut rep = r.report.clone();
            rep.stderr_tail = hygiene::redact(&tail_lines(&rep.stderr_tail, stderr_lines), &tests);
            rep.error = rep.error.map(|e| hygiene::redact(&e, &tests));
            (r.test_set.clone(), rep)
        })
        .collect();
    render_reports(shown.iter().map(|(n, r)| (n.as_str(), r)))
}

fn tail_lines(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

/// User turn following a failed attempt.
pub fn revision_request(example: &EvalExample, sample: &GenerationSample, stderr_lines: usize) -> String {
    let results = if sample.refusal {
        "No code could be extracted from the response.\n".to_string()
    } else {
        render_feedback(example, &sample.reports, stderr_lines)
    };
    format!(
        "The code failed the tests. Execution results:\n\n{results}\n\
         Revise the code. Output one complete piece of code. Your code should start with a ```python delimiter and end with a ``` delimiter."
    )
}

/// Attempts one example, appending each failed completion and its results
/// to the conversation, until it passes or `max_rounds` revisions are
/// spent. Returns the whole trajectory.
pub fn refine_loop(
    example: &EvalExample,
    generator: &dyn Generator,
    cfg: &EvalConfig,
    exec: &ExecContext,
) -> Result<Vec<GenerationSample>, EvalError> {
    cfg.validate()?;
    let mut messages = initial_messages(example, cfg);
    let mut trajectory = Vec::new();
    for round in 0..=cfg.max_rounds {
        let temperature = if round > 0 && cfg.greedy_refinement { 0.0 } else { cfg.temperature };
        let sampling = Sampling::new(temperature, cfg.top_p, 1);
        let hash = prompt_hash(&messages);
        let req = GenerationRequest { example, messages: &messages, sampling, round };
        let completion = generate(generator, &req)?.map(|mut c| c.swap_remove(0));
        let sample = sample_record(example, generator.model_id(), round, 0, &hash, completion.as_deref(), exec)?;
        let done = sample.passed();
        if !done && round < cfg.max_rounds {
            messages.push(Message::assistant(sample.completion.clone()));
            messages.push(Message::user(revision_request(example, &sample, cfg.feedback_stderr_lines)));
        }
        trajectory.push(sample);
        if done {
            break;
        }
    }
    Ok(trajectory)
}

/// Prompts of every round of a trajectory, rebuilt from the samples.
pub fn trajectory_prompts(example: &EvalExample, trajectory: &[GenerationSample], cfg: &EvalConfig) -> Vec<String> {
    let mut messages = initial_messages(example, cfg);
    let mut prompts = Vec::new();
    for s in trajectory {
        prompts.push(messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n"));
        messages.push(Message::assistant(s.completion.clone()));
        messages.push(Message::user(revision_request(example, s, cfg.feedback_stderr_lines)));
    }
    prompts
}

/// Runs [`refine_loop`] over a dataset, examples in parallel.
pub fn refine_all(
    dataset: &[EvalExample],
    generator: &dyn Generator,
    cfg: &EvalConfig,
    exec: &ExecContext,
) -> Result<Vec<Vec<GenerationSample>>, EvalError> {
    dataset.par_iter().map(|ex| refine_loop(ex, generator, cfg, exec)).collect()
}

/// Fraction of examples solved within `r` revisions, for r = 0..=rounds.
pub fn accuracy_by_round(trajectories: &[Vec<GenerationSample>], rounds: u32) -> Result<Vec<f64>, EvalError> {
    if trajectories.is_empty() {
        return Err(EvalError::NoData);
    }
    let solved_at: Vec<Option<u32>> =
        trajectories.iter().map(|t| t.iter().find(|s| s.passed()).map(|s| s.round)).collect();
    let total = trajectories.len() as f64;
    Ok((0..=rounds)
        .map(|r| solved_at.iter().filter(|s| s.is_some_and(|at| at <= r)).count() as f64 / total)
        .collect())
}

/// Round-indexed accuracy table, one row per round.
pub fn render_accuracy(model_id: &str, accuracy: &[f64]) -> String {
    let mut out = format!("round\t{model_id}\n");
    for (r, a) in accuracy.iter().enumerate() {
        out.push_str(&format!("{r}\t{:.2}\n", a * 100.0));
    }
    out
}
