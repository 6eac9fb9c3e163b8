//! The four construction stages: sandboxing, test generation, iterative
//! execution and debugging, and post-processing.
//!
//! Every fragment is driven through the stages independently (in
//! parallel); the final filter then runs once over all survivors in a
//! shared environment.

mod example;
mod filter;
mod funnel;
mod stages;
mod templates;

pub use example::{
    check_test_code, meta, slot_range, split_slot, EvalExample, ExampleError, Instruction, Provenance, SlotError,
    SlotSplit, StageRecord, TestCheckError, TestOrigin, TestSet, MIN_ASSERTS, SLOT_BEGIN, SLOT_END,
};
pub(crate) use example::target_start;
pub use filter::{
    banned_keyword, default_banned_keywords, final_filter, FilterError, FilterOutcome, BANNED_KEYWORDS,
    SHARED_ENV_FAILURE,
};
pub use funnel::{FunnelReport, Outcome, StageCounts, STAGES};
pub use stages::{
    assembled, augment_tests, debug_iterate, docstring_text, generate_instruction, generate_tests, infer_dependencies,
    parse_instruction, sandbox_fragment, validate_sandbox, DebugOutcome, DebugSettings, ExecContext, InstructionOutcome,
    ModelHandle, SandboxOutput, StageFailure, ValidationConfig,
};
pub use templates::{Template, TemplateError, Templates, USER_SEPARATOR};

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::corpus::{self, Decision, SourceFragment};
use crate::executor::{EnvError, Environment, EnvironmentManager, Executor, PIPELINE_TIMEOUT};
use crate::llm::Sampling;

/// Sampling settings per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSampling {
    pub sandbox: Sampling,
    pub tests: Sampling,
    pub debug: Sampling,
    pub instruction: Sampling,
    /// `n` is the number of augmentation candidates.
    pub augment: Sampling,
}

impl Default for StageSampling {
    fn default() -> Self {
        let s = Sampling::new(0.3, 0.95, 1);
        StageSampling { sandbox: s, tests: s, debug: s, instruction: s, augment: Sampling::new(0.3, 0.7, 5) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Extra attempts allowed per stage after the first.
    pub regeneration_cap: u32,
    pub debug_iterations: u32,
    pub shrink_guard: f64,
    pub validation: ValidationConfig,
    pub sampling: StageSampling,
    pub timeout: Duration,
    pub io_keywords: Vec<String>,
    pub banned_keywords: Vec<String>,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            regeneration_cap: 3,
            debug_iterations: 3,
            shrink_guard: 0.6,
            validation: ValidationConfig::default(),
            sampling: StageSampling::default(),
            timeout: PIPELINE_TIMEOUT,
            io_keywords: corpus::default_io_keywords(),
            banned_keywords: default_banned_keywords(),
            jobs: 0,
        }
    }
}

/// Models used by each stage. Without an augmentation model the examples
/// keep only their generated tests.
#[derive(Debug, Clone)]
pub struct StageModels {
    pub sandbox: ModelHandle,
    pub tests: ModelHandle,
    pub debug: ModelHandle,
    pub instruction: ModelHandle,
    pub augment: Option<ModelHandle>,
}

impl StageModels {
    /// The same model for every stage, including augmentation.
    pub fn uniform(model: ModelHandle) -> Self {
        StageModels {
            sandbox: model.clone(),
            tests: model.clone(),
            debug: model.clone(),
            instruction: model.clone(),
            augment: Some(model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "detail", rename_all = "snake_case")]
pub enum StageKind {
    Pending,
    Sandboxed,
    Tested,
    Debugged(u32),
    Postprocessed,
    Emitted,
    Failed(String),
}

/// Progress of one fragment through the stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: StageKind,
    /// Attempts made in the current stage.
    pub attempts: u32,
    pub history: Vec<StageRecord>,
}

impl StageState {
    fn new() -> Self {
        StageState { stage: StageKind::Pending, attempts: 0, history: Vec::new() }
    }

    fn log(&mut self, stage: &str, verdict: impl Into<String>) {
        self.history.push(StageRecord { stage: stage.to_string(), verdict: verdict.into() });
    }

    fn advance(&mut self, to: StageKind) {
        self.stage = to;
        self.attempts = 0;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("infrastructure failure on `{fragment}`: {message}")]
    Infrastructure { fragment: String, message: String },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// Everything the stages need.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub models: StageModels,
    pub templates: Templates,
    pub executor: Arc<Executor>,
    pub envs: Arc<EnvironmentManager>,
}

/// Result of [`Pipeline::run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub emitted: Vec<EvalExample>,
    pub report: FunnelReport,
    /// Final state of every fragment, in input order.
    pub states: Vec<(String, StageState)>,
}

struct FragmentRun {
    events: Vec<(&'static str, Outcome)>,
    passed_at: Option<u32>,
    example: Option<EvalExample>,
    state: StageState,
}

impl FragmentRun {
    fn fail(mut self, stage: &'static str, reason: &str) -> Self {
        self.events.push((stage, Outcome::Failed(reason.to_string())));
        self.state.log(stage, format!("failed: {reason}"));
        self.state.advance(StageKind::Failed(format!("{stage}: {reason}")));
        self
    }
}

type Infra = String;

impl Pipeline {
    /// Drives every fragment through all stages and applies the final
    /// filter. Content failures are counted in the report; an
    /// infrastructure failure aborts the run.
    pub fn run(&self, frags: &[SourceFragment]) -> Result<PipelineOutput, PipelineError> {
        let work = || -> Vec<Result<FragmentRun, PipelineError>> {
            frags
                .par_iter()
                .map(|f| {
                    self.process(f).map_err(|message| PipelineError::Infrastructure { fragment: f.id.clone(), message })
                })
                .collect()
        };
        let runs = if self.config.jobs > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.jobs)
                .build()
                .map_err(|e| PipelineError::Pool(e.to_string()))?
                .install(work)
        } else {
            work()
        };

        let mut report = FunnelReport::new(frags.len(), self.config.debug_iterations);
        let mut states = Vec::with_capacity(frags.len());
        let mut candidates = Vec::new();
        for (frag, run) in frags.iter().zip(runs) {
            let run = run?;
            for (stage, outcome) in &run.events {
                report.record(stage, outcome);
            }
            if let Some(i) = run.passed_at {
                report.record_pass(i);
            }
            if let Some(ex) = run.example {
                candidates.push(ex);
            }
            states.push((frag.id.clone(), run.state));
        }

        let outcome = final_filter(
            candidates,
            &self.executor,
            &self.envs,
            &self.config.banned_keywords,
            self.config.timeout,
        )?;
        let dropped: BTreeMap<&str, &str> = outcome.dropped.iter().map(|(id, r)| (id.as_str(), r.as_str())).collect();
        for (id, state) in states.iter_mut() {
            if !matches!(state.stage, StageKind::Postprocessed) {
                continue;
            }
            match dropped.get(id.as_str()) {
                Some(reason) => {
                    report.record("final_filter", &Outcome::Failed(reason.to_string()));
                    state.log("final_filter", format!("failed: {reason}"));
                    state.advance(StageKind::Failed(format!("final_filter: {reason}")));
                }
                None => {
                    report.record("final_filter", &Outcome::Accepted);
                    state.log("final_filter", "accepted");
                    state.advance(StageKind::Emitted);
                }
            }
        }
        let mut emitted = outcome.kept;
        for ex in &mut emitted {
            if let Some((_, state)) = states.iter().find(|(id, _)| *id == ex.id) {
                ex.provenance.history = state.history.clone();
            }
            match analysis::example_metrics(ex) {
                Ok(m) => ex.metadata.extend(m.to_metadata()),
                Err(e) => log::warn!("{}: metrics unavailable: {e}", ex.id),
            }
        }
        report.emitted = emitted.len();
        debug_assert!(report.check_conservation().is_ok(), "{:?}", report.check_conservation());
        Ok(PipelineOutput { emitted, report, states })
    }

    /// Runs the per-example stages for one fragment.
    fn process(&self, frag: &SourceFragment) -> Result<FragmentRun, Infra> {
        let cfg = &self.config;
        let mut run = FragmentRun { events: Vec::new(), passed_at: None, example: None, state: StageState::new() };

        if let Decision::Drop(reason) = corpus::prefilter(frag, &cfg.io_keywords) {
            return Ok(run.fail("intake", &reason));
        }
        run.events.push(("intake", Outcome::Accepted));
        run.state.log("intake", "accepted");

        let attempts = 1 + cfg.regeneration_cap;

        // Sandboxing.
        let mut sandboxed: Option<(SandboxOutput, SlotSplit, Environment)> = None;
        for attempt in 1..=attempts {
            run.state.attempts = attempt;
            let result = sandbox_fragment(frag, &self.models.sandbox, &self.templates.sandbox, cfg.sampling.sandbox)
                .and_then(|out| {
                    let split = validate_sandbox(&out.code, frag, &cfg.validation).map_err(StageFailure::Content)?;
                    let deps = infer_dependencies(&out.code, out.requirements.as_deref());
                    let env = self.envs.build(&deps).map_err(|e| match e {
                        EnvError::Io(m) => StageFailure::Infra(m),
                        other => {
                            log::info!("{}: dependency problem: {other}", frag.id);
                            StageFailure::Content("dependency_error".into())
                        }
                    })?;
                    Ok((out, split, env))
                });
            match result {
                Ok(done) => {
                    run.events.push(("sandbox", Outcome::Accepted));
                    run.state.log("sandbox", "accepted");
                    sandboxed = Some(done);
                    break;
                }
                Err(StageFailure::Infra(m)) => return Err(m),
                Err(StageFailure::Content(reason)) if attempt < attempts => {
                    run.events.push(("sandbox", Outcome::Regenerated(reason.clone())));
                    run.state.log("sandbox", format!("regenerate: {reason}"));
                }
                Err(StageFailure::Content(reason)) => return Ok(run.fail("sandbox", &reason)),
            }
        }
        let Some((sandbox, split, env)) = sandboxed else { unreachable!("sandbox loop either breaks or returns") };
        run.state.advance(StageKind::Sandboxed);

        // Test generation.
        let mut tests = None;
        for attempt in 1..=attempts {
            run.state.attempts = attempt;
            match generate_tests(
                &sandbox.code,
                &frag.function_name,
                &self.models.tests,
                &self.templates.tests,
                cfg.sampling.tests,
            ) {
                Ok(t) => {
                    run.events.push(("test_generation", Outcome::Accepted));
                    run.state.log("test_generation", "accepted");
                    tests = Some(t);
                    break;
                }
                Err(StageFailure::Infra(m)) => return Err(m),
                Err(StageFailure::Content(reason)) if attempt < attempts => {
                    run.events.push(("test_generation", Outcome::Regenerated(reason.clone())));
                    run.state.log("test_generation", format!("regenerate: {reason}"));
                }
                Err(StageFailure::Content(reason)) => return Ok(run.fail("test_generation", &reason)),
            }
        }
        let Some(tests) = tests else { unreachable!("test loop either breaks or returns") };
        run.state.advance(StageKind::Tested);

        // Execution and debugging.
        let exec = ExecContext { executor: &self.executor, env: &env, timeout: cfg.timeout };
        let settings = DebugSettings {
            max_iter: cfg.debug_iterations,
            shrink_guard: cfg.shrink_guard,
            sampling: cfg.sampling.debug,
        };
        let outcome = debug_iterate(
            &sandbox.code,
            &split,
            &tests.code,
            &frag.function_name,
            exec,
            &self.models.debug,
            &self.templates.debug,
            settings,
        )
        .map_err(|e| match e {
            StageFailure::Infra(m) | StageFailure::Content(m) => m,
        })?;
        let (code, split, test_code, iterations) = match outcome {
            DebugOutcome::Success { code, split, tests, iterations, history, .. } => {
                for h in history {
                    run.state.log("debug", h);
                }
                (code, split, tests, iterations)
            }
            DebugOutcome::Failure { last_report, history, .. } => {
                for h in history {
                    run.state.log("debug", h);
                }
                return Ok(run.fail("debug", &format!("tests_fail_{}", last_report.status)));
            }
        };
        run.events.push(("debug", Outcome::Accepted));
        run.passed_at = Some(iterations);
        run.state.advance(StageKind::Debugged(iterations));

        // Post-processing.
        let program = assembled(&split);
        let function_text = format!(
            "{}{}{}",
            split.function_header,
            split.docstring.as_deref().map(|d| format!("{}{d}\n", leading_indent(&split.target))).unwrap_or_default(),
            split.target
        );
        let instruction = generate_instruction(
            &code,
            &function_text,
            &frag.function_name,
            split.docstring.as_deref(),
            &self.models.instruction,
            &self.templates.instruction,
            cfg.sampling.instruction,
        )
        .map_err(failure_message)?;
        run.state.log(
            "postprocess",
            if instruction.degraded { "instruction degraded".to_string() } else { "instruction generated".to_string() },
        );

        let mut test_sets = vec![TestSet { name: "generated".into(), code: test_code, origin: TestOrigin::Generated }];
        if let Some(aug) = &self.models.augment {
            let added = augment_tests(
                &program,
                &frag.function_name,
                exec,
                aug,
                &self.templates.augment,
                cfg.sampling.augment,
            )
            .map_err(failure_message)?;
            run.state.log("postprocess", if added.is_some() { "tests augmented" } else { "no augmentation" });
            test_sets.extend(added);
        }

        let mut metadata = BTreeMap::new();
        metadata.insert(meta::FUNCTION_NAME.to_string(), frag.function_name.clone());
        metadata.insert(meta::QUALIFIED_NAME.to_string(), split.qualified_name.clone());
        metadata.insert(meta::DEBUG_ITERATIONS.to_string(), iterations.to_string());
        if let Some(d) = &split.docstring {
            metadata.insert(meta::ORIGINAL_DOCSTRING.to_string(), d.clone());
        }
        if instruction.degraded {
            metadata.insert(meta::INSTRUCTION_DEGRADED.to_string(), "true".to_string());
        }
        let example = EvalExample {
            id: frag.id.clone(),
            context: split.context.clone(),
            target: split.target.clone(),
            function_header: split.function_header.clone(),
            instruction: instruction.instruction,
            test_sets,
            dependencies: env.requirements.clone(),
            provenance: Provenance { source_id: frag.id.clone(), history: Vec::new() },
            metadata,
        };
        if let Err(e) = example.validate() {
            return Ok(run.fail("postprocess", &format!("invalid_example: {e}")));
        }
        run.events.push(("postprocess", Outcome::Accepted));
        run.state.log("postprocess", "accepted");
        run.state.advance(StageKind::Postprocessed);
        run.example = Some(example);
        Ok(run)
    }
}

fn failure_message(e: StageFailure) -> String {
    match e {
        StageFailure::Infra(m) | StageFailure::Content(m) => m,
    }
}

fn leading_indent(text: &str) -> &str {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    &first[..first.len() - first.trim_start().len()]
}

/// Runs the pipeline over `frags`.
pub fn run_pipeline(frags: &[SourceFragment], pipeline: &Pipeline) -> Result<PipelineOutput, PipelineError> {
    pipeline.run(frags)
}

/// Reads a line-delimited dataset file.
pub fn read_dataset(path: &std::path::Path) -> std::io::Result<Vec<EvalExample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Serializes examples one per line.
pub fn dataset_to_jsonl(examples: &[EvalExample]) -> String {
    examples.iter().map(|e| serde_json::to_string(e).expect("example serializes") + "\n").collect()
}
