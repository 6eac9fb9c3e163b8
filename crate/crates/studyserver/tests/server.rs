use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use benchgen_core::eval::{hygiene, score_completion, Verdict};
use benchgen_core::executor::{merge_requirements, EnvironmentManager, Executor, ShimLauncher, StubInstaller};
use benchgen_core::pipeline::{read_dataset, EvalExample, ExecContext};
use benchgen_core::study::{study_summary, StudyStore};
use benchgen_studyserver::{router, StudyConfig, SESSION_HEADER};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn shim_available() -> bool {
    std::process::Command::new("python3").arg("--version").output().is_ok_and(|o| o.status.success())
}

fn dataset() -> Vec<EvalExample> {
    read_dataset(&core_fixtures().join("replay/dataset.jsonl")).unwrap()
}

struct Server {
    app: Router,
    dir: tempfile::TempDir,
    executor: Arc<Executor>,
    env: benchgen_core::executor::Environment,
}

impl Server {
    fn with_launcher(launcher: ShimLauncher, timeout: Duration, static_dir: Option<PathBuf>) -> Server {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        let envs = EnvironmentManager::new(dir.path().join("envs"), "python3", Arc::new(StubInstaller));
        let merged = merge_requirements(ds.iter().map(|e| e.dependencies.as_slice())).unwrap();
        let env = envs.build(&merged.requirements).unwrap();
        let executor = Arc::new(Executor::new(launcher).with_stderr_tail_lines(200));
        let app = router(StudyConfig {
            dataset: ds,
            store_dir: dir.path().join("study"),
            executor: executor.clone(),
            env: env.clone(),
            timeout,
            stderr_lines: 200,
            static_dir,
        })
        .unwrap();
        Server { app, dir, executor, env }
    }

    fn new() -> Server {
        let script = core_fixtures().join("shim/runner_shim.py");
        Server::with_launcher(ShimLauncher::Python { script }, Duration::from_secs(10), None)
    }

    async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, _, v) = self.call_with_headers(method, uri, body, &[]).await;
        (status, v)
    }

    async fn call_with_headers(
        &self,
        method: Method,
        uri: &str,
        body: Option<Value>,
        headers: &[(&str, &str)],
    ) -> (StatusCode, axum::http::HeaderMap, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, headers, value)
    }

    async fn open(&self, alias: &str, example_id: &str) -> String {
        let (status, v) =
            self.call(Method::POST, "/sessions", Some(json!({"participant_alias": alias, "example_id": example_id}))).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    async fn submit(&self, session: &str, code: &str) -> (StatusCode, Value) {
        self.call(Method::POST, &format!("/sessions/{session}/submissions"), Some(json!({ "code": code }))).await
    }

    async fn outcome(&self, session: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, &format!("/sessions/{session}/outcome"), Some(body)).await
    }
}

fn uri_id(id: &str) -> String {
    id.replace('/', "%2F").replace(':', "%3A")
}

fn fenced(code: &str) -> String {
    format!("```python\n{code}```\n")
}

const WRONG: &str = "return None\n";
const MISSING_ARG: &str = "def pick(a, b):\n    return a\nreturn pick(1)\n";

fn ratings(d: u8) -> Value {
    json!({"difficulty": d, "instruction_clarity": 4, "test_quality": 4, "docstring_as_instruction": 3})
}

#[tokio::test]
async fn health_problems_and_not_found() {
    let s = Server::new();
    let (status, v) = s.call(Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "examples": 7}));

    let (_, v) = s.call(Method::GET, "/problems", None).await;
    assert_eq!(v["problems"].as_array().unwrap().len(), 7);

    let ex = &dataset()[0];
    let (status, v) = s.call(Method::GET, &format!("/problems/{}", uri_id(&ex.id)), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["example_id"], json!(ex.id));
    assert!(v["context"].as_str().unwrap().contains("Functionality:"));
    assert!(v.get("target").is_none() && v.get("test_sets").is_none());

    let (status, _) = s.call(Method::GET, "/problems/deleted-entry", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, v) = s.call(Method::GET, "/sessions/0000", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["session_id"], json!("0000"));
    let (status, _) =
        s.call(Method::POST, "/sessions", Some(json!({"participant_alias": "p", "example_id": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn session_header_is_echoed() {
    let s = Server::new();
    let (_, headers, _) = s.call_with_headers(Method::GET, "/health", None, &[(SESSION_HEADER, "abc123")]).await;
    assert_eq!(headers.get(SESSION_HEADER).unwrap(), "abc123");
}

#[tokio::test]
async fn fail_then_pass_then_rate_is_persisted() {
    if !shim_available() {
        return;
    }
    let s = Server::new();
    let ex = dataset().into_iter().find(|e| e.function_name() == "parse_duration").unwrap();
    let id = s.open("p01", &ex.id).await;

    let (status, v) = s.submit(&id, &fenced(WRONG)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["session_id"], json!(id));
    assert_eq!(v["submission"]["verdict"], json!("fail"));
    assert_eq!(v["solved"], json!(false));
    assert!(v["submission"]["feedback"].as_str().unwrap().contains("failed_assert"));

    // Rating before solving or giving up is refused.
    let (status, _) = s.outcome(&id, json!({"ratings": ratings(3), "used_external_resources": false, "gave_up": false})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, v) = s.submit(&id, &fenced(&ex.assemble())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["submission"]["verdict"], json!("pass"));
    assert_eq!(v["submissions"], json!(2));

    let (status, v) = s.submit(&id, &fenced(&ex.assemble())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], json!("session closed"));

    let (status, _) = s.outcome(&id, json!({"ratings": ratings(6), "used_external_resources": false, "gave_up": false})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, v) = s.outcome(&id, json!({"ratings": ratings(2), "used_external_resources": true, "gave_up": false})).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["finalized"], json!(true));
    assert_eq!(v["revisions"], json!(1));
    let (status, _) = s.outcome(&id, json!({"ratings": ratings(4), "used_external_resources": false, "gave_up": false})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let store = StudyStore::open(&s.dir.path().join("study")).unwrap();
    let saved = store.get(&id).unwrap();
    assert_eq!(saved.submissions.len(), 2);
    assert_eq!(saved.submissions.iter().map(|x| x.verdict).collect::<Vec<_>>(), [Verdict::Fail, Verdict::Pass]);
    assert!(saved.solved && saved.finalized && saved.used_external_resources);
    assert_eq!(saved.ratings.unwrap().values(), [2, 4, 4, 3]);
}

#[tokio::test]
async fn give_up_without_submissions() {
    let s = Server::new();
    let id = s.open("p02", &dataset()[1].id).await;
    let (status, _) = s.outcome(&id, json!({"ratings": null, "used_external_resources": false, "gave_up": false})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, v) = s.outcome(&id, json!({"ratings": ratings(5), "used_external_resources": false, "gave_up": true})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((v["solved"].clone(), v["gave_up"].clone()), (json!(false), json!(true)));
    let (status, _) = s.submit(&id, "x = 1\n").await;
    assert_eq!(status, StatusCode::CONFLICT);
}

fn strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(a) => a.iter().for_each(|x| strings(x, out)),
        Value::Object(o) => o.values().for_each(|x| strings(x, out)),
        _ => {}
    }
}

#[tokio::test]
async fn no_response_carries_target_or_test_code() {
    if !shim_available() {
        return;
    }
    let s = Server::new();
    let mut responses = Vec::new();
    for ex in dataset() {
        let mut record = |v: Value| responses.push((ex.clone(), v));
        record(s.call(Method::GET, &format!("/problems/{}", uri_id(&ex.id)), None).await.1);
        let id = s.open("scanner", &ex.id).await;
        for code in [fenced(WRONG), fenced(MISSING_ARG), "def broken(:\n".to_string(), fenced(&ex.assemble())] {
            record(s.submit(&id, &code).await.1);
        }
        record(s.call(Method::GET, &format!("/sessions/{id}"), None).await.1);
        record(s.outcome(&id, json!({"ratings": ratings(3), "used_external_resources": false, "gave_up": false})).await.1);
    }
    let (_, summary) = s.call(Method::GET, "/summary", None).await;
    let mut hits = Vec::new();
    let mut texts = 0;
    for (ex, v) in responses.iter().chain(dataset().iter().map(|e| (e.clone(), summary.clone())).collect::<Vec<_>>().iter()) {
        let mut secrets = ex.test_codes();
        secrets.push(&ex.target);
        let mut all = Vec::new();
        strings(v, &mut all);
        for text in all {
            texts += 1;
            for leak in hygiene::scan(&text, &secrets) {
                hits.push((ex.id.clone(), leak.text));
            }
        }
    }
    assert!(texts > 100);
    assert_eq!(hits, vec![]);
}

#[tokio::test]
async fn grading_matches_the_harness() {
    if !shim_available() {
        return;
    }
    let s = Server::new();
    let ctx = ExecContext { executor: &s.executor, env: &s.env, timeout: Duration::from_secs(10) };
    for ex in dataset() {
        for code in [fenced(WRONG), fenced(MISSING_ARG), fenced(&ex.assemble()), String::new()] {
            let (_, harness, _) = score_completion(&ex, &code, &ctx).unwrap();
            let id = s.open("parity", &ex.id).await;
            let (status, v) = s.submit(&id, &code).await;
            assert_eq!(status, StatusCode::OK);
            let served: Verdict = serde_json::from_value(v["submission"]["verdict"].clone()).unwrap();
            assert_eq!(served, harness, "{} / {code:?}", ex.id);
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn one_submission_in_flight_per_session() {
    if !shim_available() {
        return;
    }
    let script = core_fixtures().join("shim/runner_shim.py");
    let s = Arc::new(Server::with_launcher(ShimLauncher::Python { script }, Duration::from_secs(2), None));
    let ex = &dataset()[0];
    let id = s.open("p03", &ex.id).await;
    let other = s.open("p04", &ex.id).await;
    let spin = fenced("while True:\n    pass\n");
    let first = {
        let (s, id, spin) = (s.clone(), id.clone(), spin.clone());
        tokio::spawn(async move { s.submit(&id, &spin).await })
    };
    tokio::time::sleep(Duration::from_millis(400)).await;
    let (status, v) = s.submit(&id, &fenced(WRONG)).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
    assert_eq!(v["session_id"], json!(id));
    // Other sessions are not blocked.
    let (status, _) = s.submit(&other, &fenced(WRONG)).await;
    assert_eq!(status, StatusCode::OK);

    let (status, v) = first.await.unwrap();
    assert_eq!(status, StatusCode::OK);
    assert!(v["submission"]["feedback"].as_str().unwrap().contains("timeout"));
    let (status, v) = s.submit(&id, &fenced(&ex.assemble())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["submissions"], json!(2));
}

#[tokio::test]
async fn infrastructure_failure_is_not_counted() {
    let s = Server::with_launcher(
        ShimLauncher::Command { program: "/nonexistent/shim".into(), args: vec![] },
        Duration::from_secs(2),
        None,
    );
    let id = s.open("p05", &dataset()[0].id).await;
    let (status, v) = s.submit(&id, &fenced(WRONG)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["retryable"], json!(true));
    assert_eq!(v["session_id"], json!(id));
    let (_, v) = s.call(Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(v["submissions"], json!([]));
}

#[tokio::test]
async fn static_assets_are_served() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>study</html>").unwrap();
    let script = core_fixtures().join("shim/runner_shim.py");
    let s = Server::with_launcher(ShimLauncher::Python { script }, Duration::from_secs(2), Some(ui.path().to_path_buf()));
    let (status, v) = s.call(Method::GET, "/ui/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!("<html>study</html>"));
}

#[tokio::test]
async fn summary_over_sixteen_scripted_sessions() {
    if !shim_available() {
        return;
    }
    let s = Server::new();
    let (status, _) = s.call(Method::GET, "/summary", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let ds = dataset();
    // 13 solves after 0, 1, 2 or 4 revisions; 3 give-ups.
    let plan: Vec<Option<usize>> =
        [vec![Some(0); 5], vec![Some(1); 4], vec![Some(2); 2], vec![Some(4); 2], vec![None; 3]].concat();
    for (i, revisions) in plan.iter().enumerate() {
        let ex = &ds[i % ds.len()];
        let id = s.open(&format!("p{i:02}"), &ex.id).await;
        let external = i % 4 == 0;
        match revisions {
            Some(r) => {
                for _ in 0..*r {
                    assert_eq!(s.submit(&id, &fenced(WRONG)).await.1["solved"], json!(false));
                }
                assert_eq!(s.submit(&id, &fenced(&ex.assemble())).await.1["solved"], json!(true));
                let (status, _) =
                    s.outcome(&id, json!({"ratings": ratings(1 + (i % 5) as u8), "used_external_resources": external, "gave_up": false})).await;
                assert_eq!(status, StatusCode::OK);
            }
            None => {
                if i % 2 == 0 {
                    s.submit(&id, &fenced(WRONG)).await;
                }
                let (status, _) = s.outcome(&id, json!({"ratings": ratings(5), "used_external_resources": external, "gave_up": true})).await;
                assert_eq!(status, StatusCode::OK);
            }
        }
    }
    let (status, v) = s.call(Method::GET, "/summary", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["sessions"], json!(16));
    assert_eq!(v["solved"], json!(13));
    assert_eq!(v["solve_rate"], json!(0.8125));
    assert_eq!(v["revisions_to_solve"], json!({"0": 5, "1": 4, "2": 2, "4": 2}));
    assert_eq!(v["external_resource_rate"], json!(0.25));
    let acc: Vec<f64> = serde_json::from_value(v["accuracy_by_round"].clone()).unwrap();
    let expected: Vec<f64> = [5.0, 9.0, 11.0, 11.0, 13.0].iter().map(|x| x / 16.0).collect();
    assert_eq!(acc, expected);

    // The persisted log replays to the same summary.
    let store = StudyStore::open(&s.dir.path().join("study")).unwrap();
    let replayed = serde_json::to_value(study_summary(store.sessions(), 4).unwrap()).unwrap();
    assert_eq!(replayed, v);
}
