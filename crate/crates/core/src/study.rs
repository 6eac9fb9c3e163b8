//! Human-study sessions: the problem view, grading of submissions, the
//! append-only session store and the aggregate summary.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{self, hygiene, EvalError, SetReport, Verdict};
use crate::pipeline::{EvalExample, ExecContext, Instruction};

/// What a participant sees: never the target body nor the tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemView {
    pub example_id: String,
    pub qualified_name: String,
    pub function_header: String,
    pub instruction: Instruction,
    /// The program with the docstring in place and the body elided.
    pub context: String,
    pub test_set_names: Vec<String>,
}

pub fn problem_view(example: &EvalExample) -> ProblemView {
    ProblemView {
        example_id: example.id.clone(),
        qualified_name: example.qualified_name().to_string(),
        function_header: example.function_header.clone(),
        instruction: example.instruction.clone(),
        context: eval::prompt_code(example),
        test_set_names: example.test_sets.iter().map(|t| t.name.clone()).collect(),
    }
}

/// Five-point ratings; every field must be in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratings {
    pub difficulty: u8,
    pub instruction_clarity: u8,
    pub test_quality: u8,
    pub docstring_as_instruction: u8,
}

impl Ratings {
    pub const QUESTIONS: [&'static str; 4] = ["difficulty", "instruction_clarity", "test_quality", "docstring_as_instruction"];

    pub fn values(&self) -> [u8; 4] {
        [self.difficulty, self.instruction_clarity, self.test_quality, self.docstring_as_instruction]
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        for (q, v) in Self::QUESTIONS.iter().zip(self.values()) {
            if !(1..=5).contains(&v) {
                return Err(StudyError::Validation(format!("{q} must be between 1 and 5, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub code: String,
    pub reports: Vec<SetReport>,
    pub verdict: Verdict,
    /// The feedback text shown to the participant.
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySession {
    pub session_id: String,
    pub participant_alias: String,
    pub example_id: String,
    pub submissions: Vec<Submission>,
    pub solved: bool,
    pub gave_up: bool,
    pub used_external_resources: bool,
    pub ratings: Option<Ratings>,
    pub finalized: bool,
}

impl StudySession {
    /// Open sessions accept submissions.
    pub fn is_open(&self) -> bool {
        !self.solved && !self.gave_up && !self.finalized
    }

    /// Submissions after the first.
    pub fn revisions(&self) -> usize {
        self.submissions.len().saturating_sub(1)
    }
}

/// Final answers recorded when a participant stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub ratings: Option<Ratings>,
    pub used_external_resources: bool,
    pub gave_up: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("session closed")]
    Closed,
    #[error("{0}")]
    Validation(String),
    #[error("grading failed, submission not counted: {0}")]
    Infrastructure(String),
    #[error("session store I/O: {0}")]
    Io(String),
    #[error("no finalized sessions")]
    NoData,
}

fn io_err(e: impl std::fmt::Display) -> StudyError {
    StudyError::Io(e.to_string())
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Grades a participant's code with the same path the harness uses for
/// model completions. Stderr and errors are shown with test text withheld.
pub fn grade(example: &EvalExample, code: &str, exec: &ExecContext, stderr_lines: usize) -> Result<Submission, StudyError> {
    let (reports, verdict, refusal) = eval::score_completion(example, code, exec).map_err(|e| match e {
        EvalError::Infrastructure { message, .. } => StudyError::Infrastructure(message),
        other => StudyError::Infrastructure(other.to_string()),
    })?;
    let tests = example.test_codes();
    let reports: Vec<SetReport> = reports
        .into_iter()
        .map(|mut r| {
            r.report.stderr_tail = hygiene::redact(&r.report.stderr_tail, &tests);
            r.report.error = r.report.error.map(|e| hygiene::redact(&e, &tests));
            r
        })
        .collect();
    let feedback = if refusal {
        "No code could be extracted from the submission.\n".to_string()
    } else {
        eval::render_feedback(example, &reports, stderr_lines)
    };
    Ok(Submission { timestamp_ms: now_ms(), code: code.to_string(), reports, verdict, feedback })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created { session: StudySession },
    Submitted { session_id: String, submission: Submission },
    Finalized { session_id: String, outcome: OutcomeRecord },
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    events: usize,
    sessions: Vec<StudySession>,
}

/// File name of the session event log.
pub const SESSIONS_FILE: &str = "sessions";
const SNAPSHOT_FILE: &str = "sessions.snapshot";

/// Sessions kept in memory, backed by an append-only event log and a
/// periodic snapshot.
pub struct StudyStore {
    dir: PathBuf,
    sessions: BTreeMap<String, StudySession>,
    log: File,
    events: usize,
    snapshot_every: usize,
}

impl StudyStore {
    /// Opens (or creates) the store in `dir`, replaying the snapshot and
    /// the log entries written after it.
    pub fn open(dir: &Path) -> Result<Self, StudyError> {
        fs::create_dir_all(dir).map_err(io_err)?;
        let mut sessions = BTreeMap::new();
        let mut skip = 0;
        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let snap: Snapshot = serde_json::from_str(&fs::read_to_string(&snap_path).map_err(io_err)?).map_err(io_err)?;
            skip = snap.events;
            sessions = snap.sessions.into_iter().map(|s| (s.session_id.clone(), s)).collect();
        }
        let log_path = dir.join(SESSIONS_FILE);
        let mut events = 0;
        if log_path.exists() {
            for line in BufReader::new(File::open(&log_path).map_err(io_err)?).lines() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                events += 1;
                if events <= skip {
                    continue;
                }
                let event: Event = serde_json::from_str(&line).map_err(io_err)?;
                apply(&mut sessions, event)?;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err)?;
        Ok(StudyStore { dir: dir.to_path_buf(), sessions, log, events, snapshot_every: 50 })
    }

    pub fn get(&self, session_id: &str) -> Result<&StudySession, StudyError> {
        self.sessions.get(session_id).ok_or_else(|| StudyError::NotFound { kind: "session", id: session_id.to_string() })
    }

    pub fn sessions(&self) -> impl Iterator<Item = &StudySession> {
        self.sessions.values()
    }

    pub fn create(&mut self, participant_alias: &str, example_id: &str) -> Result<StudySession, StudyError> {
        let session_id = loop {
            let id = hex::encode(rand::thread_rng().gen::<[u8; 12]>());
            if !self.sessions.contains_key(&id) {
                break id;
            }
        };
        let session = StudySession {
            session_id,
            participant_alias: participant_alias.to_string(),
            example_id: example_id.to_string(),
            submissions: Vec::new(),
            solved: false,
            gave_up: false,
            used_external_resources: false,
            ratings: None,
            finalized: false,
        };
        self.commit(Event::Created { session: session.clone() })?;
        Ok(session)
    }

    /// Checks that a submission would be accepted right now.
    pub fn check_open(&self, session_id: &str) -> Result<&StudySession, StudyError> {
        let s = self.get(session_id)?;
        if !s.is_open() {
            return Err(StudyError::Closed);
        }
        Ok(s)
    }

    pub fn add_submission(&mut self, session_id: &str, submission: Submission) -> Result<StudySession, StudyError> {
        self.check_open(session_id)?;
        self.commit(Event::Submitted { session_id: session_id.to_string(), submission })?;
        Ok(self.sessions[session_id].clone())
    }

    pub fn record_outcome(&mut self, session_id: &str, outcome: OutcomeRecord) -> Result<StudySession, StudyError> {
        let s = self.get(session_id)?;
        if s.finalized {
            return Err(StudyError::Closed);
        }
        if let Some(r) = &outcome.ratings {
            r.validate()?;
        }
        if s.submissions.is_empty() && !outcome.gave_up {
            return Err(StudyError::Validation("no submission yet; give up explicitly to finish".into()));
        }
        if outcome.ratings.is_some() && !s.solved && !outcome.gave_up {
            return Err(StudyError::Validation("ratings are collected after solving or giving up".into()));
        }
        self.commit(Event::Finalized { session_id: session_id.to_string(), outcome })?;
        Ok(self.sessions[session_id].clone())
    }

    fn commit(&mut self, event: Event) -> Result<(), StudyError> {
        let line = serde_json::to_string(&event).map_err(io_err)?;
        apply(&mut self.sessions, event)?;
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(io_err)?;
        self.events += 1;
        if self.events % self.snapshot_every == 0 {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Writes the current state atomically next to the log.
    pub fn snapshot(&self) -> Result<(), StudyError> {
        let snap = Snapshot { events: self.events, sessions: self.sessions.values().cloned().collect() };
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string(&snap).map_err(io_err)?).map_err(io_err)?;
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE)).map_err(io_err)
    }
}

fn apply(sessions: &mut BTreeMap<String, StudySession>, event: Event) -> Result<(), StudyError> {
    let missing = |id: &str| StudyError::NotFound { kind: "session", id: id.to_string() };
    match event {
        Event::Created { session } => {
            sessions.insert(session.session_id.clone(), session);
        }
        Event::Submitted { session_id, submission } => {
            let s = sessions.get_mut(&session_id).ok_or_else(|| missing(&session_id))?;
            s.solved = submission.verdict == Verdict::Pass;
            s.submissions.push(submission);
        }
        Event::Finalized { session_id, outcome } => {
            let s = sessions.get_mut(&session_id).ok_or_else(|| missing(&session_id))?;
            s.ratings = outcome.ratings;
            s.used_external_resources = outcome.used_external_resources;
            s.gave_up = outcome.gave_up && !s.solved;
            s.finalized = true;
        }
    }
    Ok(())
}

/// Aggregates over finalized sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub sessions: usize,
    pub solved: usize,
    pub solve_rate: f64,
    /// Revisions before the passing submission, over solved sessions.
    pub revisions_to_solve: BTreeMap<usize, usize>,
    pub external_resource_rate: f64,
    pub mean_ratings: BTreeMap<String, f64>,
    /// Fraction of sessions solved within `r` revisions.
    pub accuracy_by_round: Vec<f64>,
}

/// Summary over the finalized sessions in `sessions`, with the accuracy
/// table running to `rounds` revisions.
pub fn study_summary<'a>(
    sessions: impl IntoIterator<Item = &'a StudySession>,
    rounds: usize,
) -> Result<StudySummary, StudyError> {
    let done: Vec<&StudySession> = sessions.into_iter().filter(|s| s.finalized).collect();
    if done.is_empty() {
        return Err(StudyError::NoData);
    }
    let n = done.len() as f64;
    let solved: Vec<&&StudySession> = done.iter().filter(|s| s.solved).collect();
    let mut revisions_to_solve = BTreeMap::new();
    for s in &solved {
        *revisions_to_solve.entry(s.revisions()).or_default() += 1;
    }
    let rated: Vec<Ratings> = done.iter().filter_map(|s| s.ratings).collect();
    let mut mean_ratings = BTreeMap::new();
    if !rated.is_empty() {
        for (i, q) in Ratings::QUESTIONS.iter().enumerate() {
            let sum: f64 = rated.iter().map(|r| f64::from(r.values()[i])).sum();
            mean_ratings.insert(q.to_string(), sum / rated.len() as f64);
        }
    }
    let accuracy_by_round =
        (0..=rounds).map(|r| solved.iter().filter(|s| s.revisions() <= r).count() as f64 / n).collect();
    Ok(StudySummary {
        sessions: done.len(),
        solved: solved.len(),
        solve_rate: solved.len() as f64 / n,
        revisions_to_solve,
        external_resource_rate: done.iter().filter(|s| s.used_external_resources).count() as f64 / n,
        mean_ratings,
        accuracy_by_round,
    })
}
