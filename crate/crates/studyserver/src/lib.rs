//! HTTP service for the human solvability study.
//!
//! Participants open a session on one example, submit code until it passes
//! or they give up, then record ratings. Submissions are graded with the
//! same executor path as model completions. Responses never carry the
//! ground-truth body or test code; submitted code is stored but not echoed.
//!
//! Endpoints:
//!
//! | method | path                              | body                                   |
//! |--------|-----------------------------------|----------------------------------------|
//! | GET    | `/health`                         |                                        |
//! | GET    | `/problems`                       |                                        |
//! | GET    | `/problems/{example_id}`          |                                        |
//! | POST   | `/sessions`                       | `{participant_alias, example_id}`      |
//! | GET    | `/sessions/{session_id}`          |                                        |
//! | POST   | `/sessions/{session_id}/submissions` | `{code}`                            |
//! | POST   | `/sessions/{session_id}/outcome`  | `{ratings?, used_external_resources, gave_up}` |
//! | GET    | `/summary?rounds=N`               |                                        |
//! | GET    | `/ui/...`                         | static assets, when configured         |
//!
//! Session-scoped responses include `session_id` in the body. Every
//! response echoes an `x-session-id` request header.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderName, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use benchgen_core::eval::{hygiene, SetReport, Verdict};
use benchgen_core::executor::{Environment, Executor};
use benchgen_core::pipeline::{EvalExample, ExecContext};
use benchgen_core::study::{
    self, problem_view, OutcomeRecord, Ratings, StudyError, StudySession, StudyStore, Submission,
};

pub const SESSION_HEADER: &str = "x-session-id";

/// Revisions covered by the summary's accuracy table unless asked otherwise.
pub const DEFAULT_SUMMARY_ROUNDS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate example id `{0}`")]
    DuplicateExample(String),
    #[error(transparent)]
    Store(#[from] StudyError),
    #[error("binding {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server: {0}")]
    Serve(std::io::Error),
}

/// Everything the server needs.
pub struct StudyConfig {
    pub dataset: Vec<EvalExample>,
    pub store_dir: PathBuf,
    pub executor: Arc<Executor>,
    /// Environment holding the dependencies of every example.
    pub env: Environment,
    /// Per-test-set timeout.
    pub timeout: Duration,
    /// Stderr lines shown per test set.
    pub stderr_lines: usize,
    /// Directory served under `/ui`.
    pub static_dir: Option<PathBuf>,
}

struct AppState {
    examples: BTreeMap<String, EvalExample>,
    store: Mutex<StudyStore>,
    grading: Mutex<HashSet<String>>,
    executor: Arc<Executor>,
    env: Environment,
    timeout: Duration,
    stderr_lines: usize,
}

/// An error response; `session_id` is echoed when the request named one.
struct ApiError {
    status: StatusCode,
    message: String,
    session_id: Option<String>,
    retryable: bool,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into(), session_id: None, retryable: false }
    }

    fn for_session(mut self, id: &str) -> Self {
        self.session_id = Some(id.to_string());
        self
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let (status, retryable) = match &e {
            StudyError::NotFound { .. } => (StatusCode::NOT_FOUND, false),
            StudyError::Closed => (StatusCode::CONFLICT, false),
            StudyError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, false),
            StudyError::NoData => (StatusCode::NOT_FOUND, false),
            StudyError::Infrastructure(_) => (StatusCode::SERVICE_UNAVAILABLE, true),
            StudyError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, true),
        };
        ApiError { status, message: e.to_string(), session_id: None, retryable }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message, "retryable": self.retryable });
        if let Some(id) = self.session_id {
            body["session_id"] = Value::String(id);
        }
        (self.status, Json(body)).into_response()
    }
}

/// A submission as returned to the participant: no code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionView {
    pub timestamp_ms: u64,
    pub reports: Vec<SetReport>,
    pub verdict: Verdict,
    pub feedback: String,
}

/// A session as returned over HTTP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub participant_alias: String,
    pub example_id: String,
    pub submissions: Vec<SubmissionView>,
    pub solved: bool,
    pub gave_up: bool,
    pub used_external_resources: bool,
    pub ratings: Option<Ratings>,
    pub finalized: bool,
    pub revisions: usize,
}

/// Response to a submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub session_id: String,
    pub submission: SubmissionView,
    pub solved: bool,
    pub submissions: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NewSession {
    pub participant_alias: String,
    pub example_id: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubmitRequest {
    pub code: String,
}

#[derive(Debug, Clone, Deserialize)]
struct SummaryQuery {
    rounds: Option<usize>,
}

fn submission_view(s: &Submission) -> SubmissionView {
    SubmissionView { timestamp_ms: s.timestamp_ms, reports: s.reports.clone(), verdict: s.verdict, feedback: s.feedback.clone() }
}

fn session_view(s: &StudySession) -> SessionView {
    SessionView {
        session_id: s.session_id.clone(),
        participant_alias: s.participant_alias.clone(),
        example_id: s.example_id.clone(),
        submissions: s.submissions.iter().map(submission_view).collect(),
        solved: s.solved,
        gave_up: s.gave_up,
        used_external_resources: s.used_external_resources,
        ratings: s.ratings,
        finalized: s.finalized,
        revisions: s.revisions(),
    }
}

/// Builds the router over an opened session store.
pub fn router(config: StudyConfig) -> Result<Router, ServerError> {
    if config.dataset.is_empty() {
        return Err(ServerError::EmptyDataset);
    }
    let mut examples = BTreeMap::new();
    for ex in config.dataset {
        let id = ex.id.clone();
        if examples.insert(id.clone(), ex).is_some() {
            return Err(ServerError::DuplicateExample(id));
        }
    }
    let store = StudyStore::open(&config.store_dir)?;
    let state = Arc::new(AppState {
        examples,
        store: Mutex::new(store),
        grading: Mutex::new(HashSet::new()),
        executor: config.executor,
        env: config.env,
        timeout: config.timeout,
        stderr_lines: config.stderr_lines,
    });
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/problems", get(list_problems))
        .route("/problems/{example_id}", get(get_problem))
        .route("/sessions", post(create_session))
        .route("/sessions/{session_id}", get(get_session))
        .route("/sessions/{session_id}/submissions", post(submit))
        .route("/sessions/{session_id}/outcome", post(record_outcome))
        .route("/summary", get(summary))
        .with_state(state);
    if let Some(dir) = config.static_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    Ok(app.layer(middleware::from_fn(echo_session_header)))
}

/// Serves until ctrl-c. `on_ready` gets the bound address (useful with
/// port 0).
pub async fn serve(config: StudyConfig, addr: &str, on_ready: impl FnOnce(SocketAddr)) -> Result<(), ServerError> {
    let app = router(config)?;
    let listener =
        tokio::net::TcpListener::bind(addr).await.map_err(|source| ServerError::Bind { addr: addr.to_string(), source })?;
    let local = listener.local_addr().map_err(ServerError::Serve)?;
    log::info!("study server listening on {local}");
    on_ready(local);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServerError::Serve)
}

async fn echo_session_header(req: Request, next: Next) -> Response {
    let echoed = req.headers().get(SESSION_HEADER).cloned();
    let mut resp = next.run(req).await;
    if let Some(v) = echoed {
        resp.headers_mut().insert(HeaderName::from_static(SESSION_HEADER), v);
    }
    resp
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "examples": st.examples.len() }))
}

async fn list_problems(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "problems": st.examples.keys().collect::<Vec<_>>() }))
}

async fn get_problem(State(st): State<Arc<AppState>>, Path(example_id): Path<String>) -> Result<Json<Value>, ApiError> {
    let ex = st.examples.get(&example_id).ok_or_else(|| {
        ApiError::from(StudyError::NotFound { kind: "example", id: example_id.clone() })
    })?;
    Ok(Json(serde_json::to_value(problem_view(ex)).expect("view serializes")))
}

async fn create_session(State(st): State<Arc<AppState>>, Json(req): Json<NewSession>) -> Result<impl IntoResponse, ApiError> {
    if !st.examples.contains_key(&req.example_id) {
        return Err(StudyError::NotFound { kind: "example", id: req.example_id }.into());
    }
    if req.participant_alias.trim().is_empty() {
        return Err(StudyError::Validation("participant_alias must not be empty".into()).into());
    }
    let session = lock(&st.store).create(req.participant_alias.trim(), &req.example_id)?;
    let ex = &st.examples[&req.example_id];
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "session_id": session.session_id,
            "session": session_view(&session),
            "problem": problem_view(ex),
        })),
    ))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(session_id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let store = lock(&st.store);
    let s = store.get(&session_id).map_err(|e| ApiError::from(e).for_session(&session_id))?;
    Ok(Json(session_view(s)))
}

/// Releases the per-session grading slot when dropped.
struct GradingSlot {
    state: Arc<AppState>,
    session_id: String,
}

impl Drop for GradingSlot {
    fn drop(&mut self) {
        lock(&self.state.grading).remove(&self.session_id);
    }
}

async fn submit(
    State(st): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    Json(req): Json<SubmitRequest>,
) -> Result<Json<SubmitResponse>, ApiError> {
    let scoped = |e: StudyError| ApiError::from(e).for_session(&session_id);
    let example_id = lock(&st.store).check_open(&session_id).map_err(scoped)?.example_id.clone();
    if !lock(&st.grading).insert(session_id.clone()) {
        return Err(ApiError::new(StatusCode::CONFLICT, "a submission for this session is still being graded")
            .for_session(&session_id));
    }
    let _slot = GradingSlot { state: st.clone(), session_id: session_id.clone() };

    let graded = {
        let st = st.clone();
        let code = req.code;
        tokio::task::spawn_blocking(move || {
            let ex = &st.examples[&example_id];
            let ctx = ExecContext { executor: &st.executor, env: &st.env, timeout: st.timeout };
            study::grade(ex, &code, &ctx, st.stderr_lines).map(|mut sub| {
                // Tracebacks quote the submitted code; hide any overlap
                // with the ground truth as well.
                sub.feedback = hygiene::redact(&sub.feedback, &[&ex.target]);
                for r in &mut sub.reports {
                    r.report.stderr_tail = hygiene::redact(&r.report.stderr_tail, &[&ex.target]);
                }
                sub
            })
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).for_session(&session_id))?
    };
    let submission = graded.map_err(scoped)?;
    let view = submission_view(&submission);
    let session = lock(&st.store).add_submission(&session_id, submission).map_err(scoped)?;
    Ok(Json(SubmitResponse {
        session_id: session.session_id.clone(),
        submission: view,
        solved: session.solved,
        submissions: session.submissions.len(),
    }))
}

async fn record_outcome(
    State(st): State<Arc<AppState>>,
    Path(session_id): Path<String>,
    Json(outcome): Json<OutcomeRecord>,
) -> Result<Json<SessionView>, ApiError> {
    if lock(&st.grading).contains(&session_id) {
        return Err(ApiError::new(StatusCode::CONFLICT, "a submission for this session is still being graded")
            .for_session(&session_id));
    }
    let session =
        lock(&st.store).record_outcome(&session_id, outcome).map_err(|e| ApiError::from(e).for_session(&session_id))?;
    Ok(Json(session_view(&session)))
}

async fn summary(State(st): State<Arc<AppState>>, Query(q): Query<SummaryQuery>) -> Result<Json<Value>, ApiError> {
    let store = lock(&st.store);
    let s = study::study_summary(store.sessions(), q.rounds.unwrap_or(DEFAULT_SUMMARY_ROUNDS))?;
    Ok(Json(serde_json::to_value(s).expect("summary serializes")))
}
