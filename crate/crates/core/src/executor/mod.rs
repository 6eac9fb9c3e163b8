//! Supervised execution of assembled programs against test sets.
//!
//! Each test set runs in its own child process: the runner shim is handed a
//! fresh temporary directory holding `solution_under_test` and `tests`, and
//! reports a single-line verdict record as the last line of its stdout.

pub mod env;
mod process;
mod verdict;

pub use env::{
    merge_requirements, normalize_requirements, EnvError, Environment, EnvironmentManager, MergedRequirements, PackageInstaller,
    PipInstaller, StubInstaller,
};
pub use verdict::{parse_verdict_line, ShimStatus, VerdictRecord};

use std::path::PathBuf;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// File name the program under test is written to.
pub const SOLUTION_FILE: &str = "solution_under_test";
/// File name the test code is written to.
pub const TESTS_FILE: &str = "tests";

/// Per-test-set timeout while constructing a dataset.
pub const PIPELINE_TIMEOUT: Duration = Duration::from_secs(30);
/// Per-test-set timeout while evaluating generators.
pub const EVALUATION_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionJob {
    pub program: String,
    pub test_code: String,
    pub dependencies: Vec<String>,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub collect_coverage: bool,
    #[serde(default)]
    pub network_allowed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JobError {
    #[error("timeout must be positive")]
    ZeroTimeout,
    #[error("program is empty")]
    EmptyProgram,
    #[error("test code is empty")]
    EmptyTests,
}

impl ExecutionJob {
    pub fn new(program: impl Into<String>, test_code: impl Into<String>, timeout: Duration) -> Self {
        ExecutionJob {
            program: program.into(),
            test_code: test_code.into(),
            dependencies: Vec::new(),
            timeout,
            collect_coverage: false,
            network_allowed: false,
        }
    }

    pub fn with_coverage(mut self, on: bool) -> Self {
        self.collect_coverage = on;
        self
    }

    pub fn validate(&self) -> Result<(), JobError> {
        if self.timeout.is_zero() {
            return Err(JobError::ZeroTimeout);
        }
        if self.program.trim().is_empty() {
            return Err(JobError::EmptyProgram);
        }
        if self.test_code.trim().is_empty() {
            return Err(JobError::EmptyTests);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Passed,
    FailedAssert,
    CompileError,
    RuntimeError,
    Timeout,
    InfraError,
}

impl ExecStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecStatus::Passed => "passed",
            ExecStatus::FailedAssert => "failed_assert",
            ExecStatus::CompileError => "compile_error",
            ExecStatus::RuntimeError => "runtime_error",
            ExecStatus::Timeout => "timeout",
            ExecStatus::InfraError => "infra_error",
        }
    }
}

impl std::fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub status: ExecStatus,
    /// `(1-based assert index, passed)` for every assert reached.
    pub per_assert: Vec<(usize, bool)>,
    pub stderr_tail: String,
    /// Error message reported by the shim or the supervisor.
    #[serde(default)]
    pub error: Option<String>,
    pub duration: f64,
    pub line_coverage: Option<f64>,
}

impl ExecutionReport {
    pub fn passed(&self) -> bool {
        self.status == ExecStatus::Passed
    }

    pub fn first_failed_assert(&self) -> Option<usize> {
        self.per_assert.iter().find(|(_, ok)| !ok).map(|(i, _)| *i)
    }

    fn infra(message: impl Into<String>, duration: Duration) -> Self {
        ExecutionReport {
            status: ExecStatus::InfraError,
            per_assert: Vec::new(),
            stderr_tail: String::new(),
            error: Some(message.into()),
            duration: duration.as_secs_f64(),
            line_coverage: None,
        }
    }
}

/// Conjunction of per-set verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Pass,
    Fail,
    /// At least one set could not be judged because of an infrastructure
    /// problem; this is not a content failure.
    Infra,
}

/// How the runner shim is started.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShimLauncher {
    /// A Python script run with the environment's interpreter.
    Python { script: PathBuf },
    /// Any executable speaking the shim protocol.
    Command { program: PathBuf, #[serde(default)] args: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct Executor {
    shim: ShimLauncher,
    network_jail: Option<Vec<String>>,
    /// Extra time the shim gets past the job timeout before it is killed.
    kill_grace: Duration,
    stderr_tail_lines: usize,
}

/// Lines of stderr kept in a report.
pub const STDERR_TAIL_LINES: usize = 20;

impl Executor {
    /// Creates an executor, probing once for a network namespace wrapper.
    pub fn new(shim: ShimLauncher) -> Self {
        Executor {
            shim,
            network_jail: process::probe_network_jail(),
            kill_grace: Duration::from_millis(500),
            stderr_tail_lines: STDERR_TAIL_LINES,
        }
    }

    /// Disables the network namespace wrapper; network-denied jobs then only
    /// get proxy variables pointing at a closed port.
    pub fn without_network_jail(mut self) -> Self {
        self.network_jail = None;
        self
    }

    /// Number of stderr lines kept in reports.
    pub fn with_stderr_tail_lines(mut self, lines: usize) -> Self {
        self.stderr_tail_lines = lines;
        self
    }

    pub fn has_network_jail(&self) -> bool {
        self.network_jail.is_some()
    }

    pub fn shim(&self) -> &ShimLauncher {
        &self.shim
    }

    /// Runs one test set. Never fails: supervision problems come back as
    /// `infra_error` or `timeout` reports.
    pub fn execute(&self, job: &ExecutionJob, env: &Environment) -> ExecutionReport {
        if let Err(e) = job.validate() {
            return ExecutionReport::infra(format!("invalid job: {e}"), Duration::ZERO);
        }
        let run = match process::run_shim(self, job, env) {
            Ok(run) => run,
            Err(e) => return ExecutionReport::infra(format!("could not run shim: {e}"), Duration::ZERO),
        };
        let stderr_tail = tail_lines(&run.stderr, self.stderr_tail_lines);
        if run.timed_out {
            return ExecutionReport {
                status: ExecStatus::Timeout,
                per_assert: Vec::new(),
                stderr_tail,
                error: Some(format!("killed after {:.1}s", job.timeout.as_secs_f64())),
                duration: run.duration.as_secs_f64(),
                line_coverage: None,
            };
        }
        if !run.exit_ok {
            let mut r = ExecutionReport::infra(format!("shim exited abnormally ({})", run.exit_description), run.duration);
            r.stderr_tail = stderr_tail;
            return r;
        }
        match verdict::parse_verdict_line(&run.stdout) {
            Ok(record) => match verdict::to_report(record, job.collect_coverage, run.duration, stderr_tail.clone()) {
                Ok(report) => report,
                Err(violation) => {
                    let mut r = ExecutionReport::infra(format!("shim protocol violation: {violation}"), run.duration);
                    r.stderr_tail = stderr_tail;
                    r
                }
            },
            Err(violation) => {
                let mut r = ExecutionReport::infra(format!("shim protocol violation: {violation}"), run.duration);
                r.stderr_tail = stderr_tail;
                r
            }
        }
    }

    /// Runs every test set in its own process. The overall verdict is the
    /// conjunction of per-set verdicts; any infrastructure error makes it
    /// [`Overall::Infra`].
    pub fn execute_all_sets<S: AsRef<str> + Sync>(
        &self,
        program: &str,
        test_sets: &[S],
        env: &Environment,
        timeout: Duration,
        collect_coverage: bool,
    ) -> (Overall, Vec<ExecutionReport>) {
        let reports: Vec<ExecutionReport> = test_sets
            .par_iter()
            .map(|tests| {
                let mut job = ExecutionJob::new(program, tests.as_ref(), timeout).with_coverage(collect_coverage);
                job.dependencies = env.requirements.clone();
                self.execute(&job, env)
            })
            .collect();
        (overall_verdict(&reports), reports)
    }
}

pub fn overall_verdict(reports: &[ExecutionReport]) -> Overall {
    if reports.iter().any(|r| r.status == ExecStatus::InfraError) {
        Overall::Infra
    } else if !reports.is_empty() && reports.iter().all(ExecutionReport::passed) {
        Overall::Pass
    } else {
        Overall::Fail
    }
}

/// Plain-text rendering of per-set reports, as shown to a model or a
/// participant: status, first failing assert, error and stderr tail.
pub fn render_reports<'a>(reports: impl IntoIterator<Item = (&'a str, &'a ExecutionReport)>) -> String {
    let mut out = String::new();
    for (name, r) in reports {
        out.push_str(&format!("Test set {name}: {}\n", r.status));
        if let Some(i) = r.first_failed_assert() {
            out.push_str(&format!("First failing assert: #{i}\n"));
        }
        if let Some(e) = &r.error {
            out.push_str(&format!("Error: {e}\n"));
        }
        if !r.stderr_tail.trim().is_empty() {
            out.push_str("Stderr (tail):\n");
            out.push_str(&r.stderr_tail);
            if !r.stderr_tail.ends_with('\n') {
                out.push('\n');
            }
        }
    }
    out
}

fn tail_lines(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}
