use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn replay_dir() -> PathBuf {
    core_fixtures().join("replay")
}

fn python_available() -> bool {
    Command::new("python3").arg("--version").output().is_ok_and(|o| o.status.success())
}

/// A config in `dir` pointing at the fixture shim with the offline
/// installer; `extra` is appended verbatim.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "output_dir = \"out\"\n{extra}\n\n[executor]\nshim = {:?}\ninstaller = \"stub\"\n",
        core_fixtures().join("shim/runner_shim.py")
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn benchgen(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_benchgen"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("BENCHGEN_TEST_UNSET_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Output dir of a config already holding the fixture dataset.
fn with_fixture_dataset(dir: &Path, extra: &str) -> PathBuf {
    let cfg = write_config(dir, extra);
    std::fs::create_dir_all(dir.join("out")).unwrap();
    std::fs::copy(replay_dir().join("dataset.jsonl"), dir.join("out/dataset.jsonl")).unwrap();
    cfg
}

const EVAL: &str = "[eval]\nn_samples = 2\nk_list = [1, 2]\n";

#[test]
fn ingest_reports_skips_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = core_fixtures().join("corpus_small.jsonl");
    let cfg = write_config(dir.path(), &format!("corpus = {corpus:?}"));
    let o = benchgen(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(1), "{o:?}");
    assert!(stdout(&o).starts_with("kept 5 fragments, skipped 5\n"), "{}", stdout(&o));
    let written = std::fs::read_to_string(dir.path().join("out/fragments.jsonl")).unwrap();
    assert_eq!(written.lines().count(), 5);
}

#[test]
fn ingest_clean_and_empty_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = replay_dir().join("corpus.jsonl");
    let cfg = write_config(dir.path(), &format!("corpus = {corpus:?}"));
    let o = benchgen(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).starts_with("kept 14 fragments, skipped 0\n"));

    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let cfg = write_config(dir.path(), "corpus = \"empty.jsonl\"");
    let o = benchgen(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(std::fs::read_to_string(dir.path().join("out/fragments.jsonl")).unwrap(), "");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "corpus = \"nowhere.jsonl\"");
    let o = benchgen(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.jsonl"));

    let o = benchgen(&dir.path().join("absent.toml"), &["ingest"]);
    assert_eq!(o.status.code(), Some(2));
}

const FIXTURE_MODELS: &str = "[models.fixture-model]\nprovider = \"http\"\nbase_url = \"http://127.0.0.1:9/v1\"\n\
                              api_key_env = \"BENCHGEN_TEST_UNSET_KEY\"\n\n[stages]\nsandbox = \"fixture-model\"\n\
                              tests = \"fixture-model\"\ndebug = \"fixture-model\"\ninstruction = \"fixture-model\"\n\
                              augment = \"fixture-model\"\n";

#[test]
fn generate_replays_the_recorded_fixture() {
    if !python_available() {
        eprintln!("python3 unavailable; skipping");
        return;
    }
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let extra = format!(
            "corpus = {:?}\nreplay = \"replay_strict\"\ntranscript = {:?}\n{FIXTURE_MODELS}",
            replay_dir().join("corpus.jsonl"),
            replay_dir().join("transcript.jsonl"),
        );
        let cfg = write_config(dir.path(), &extra);
        let o = benchgen(&cfg, &["generate"]);
        // Some fragments are rejected along the way.
        assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).ends_with("emitted 7 of 14 fragments\n"), "{}", stdout(&o));
        let read = |name: &str| std::fs::read_to_string(dir.path().join("out").join(name)).unwrap();
        assert_eq!(read("dataset.jsonl"), std::fs::read_to_string(replay_dir().join("dataset.jsonl")).unwrap());
        assert_eq!(read("funnel.txt"), std::fs::read_to_string(replay_dir().join("funnel.txt")).unwrap());
        assert_eq!(read("funnel.json"), std::fs::read_to_string(replay_dir().join("funnel.json")).unwrap());
        outputs.push((read("dataset.jsonl"), read("funnel.json"), read("states.json")));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn live_mode_without_credentials_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let extra = format!("corpus = {:?}\n{FIXTURE_MODELS}", replay_dir().join("corpus.jsonl"));
    let cfg = write_config(dir.path(), &extra);
    let o = benchgen(&cfg, &["generate"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("BENCHGEN_TEST_UNSET_KEY"));
}

#[test]
fn evaluate_oracle_and_refinement_table() {
    if !python_available() {
        eprintln!("python3 unavailable; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_fixture_dataset(dir.path(), EVAL);
    let o = benchgen(&cfg, &["evaluate", "--model", "oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "Model\tPass@1\tPass@2\noracle\t100.00\t100.00\n");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report-oracle.json")).unwrap()).unwrap();
    assert_eq!(report["pass_at_k"]["1"], 1.0);
    let samples = std::fs::read_to_string(dir.path().join("out/samples-oracle.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), 14);

    let o = benchgen(&cfg, &["evaluate", "--model", "empty", "--rounds", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "round\tempty\n0\t0.00\n1\t0.00\n2\t0.00\n3\t0.00\n4\t0.00\n");
    let trajectories = std::fs::read_to_string(dir.path().join("out/trajectories-empty.jsonl")).unwrap();
    assert_eq!(trajectories.lines().count(), 7);

    let o = benchgen(&cfg, &["evaluate", "--model", "nobody"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown model alias `nobody`"));
}

#[test]
fn analyze_needs_results_unless_metrics_only() {
    if !python_available() {
        eprintln!("python3 unavailable; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_fixture_dataset(dir.path(), EVAL);
    let o = benchgen(&cfg, &["analyze"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");

    let o = benchgen(&cfg, &["analyze", "--metrics-only"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(stdout(&o), "metrics for 7 of 7 examples\n");
    let analysis = std::fs::read_to_string(dir.path().join("out/analysis.jsonl")).unwrap();
    assert_eq!(analysis.lines().count(), 7);

    assert_eq!(benchgen(&cfg, &["evaluate", "--model", "oracle"]).status.code(), Some(0));
    let o = benchgen(&cfg, &["analyze"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let table = std::fs::read_to_string(dir.path().join("out/breakdown-oracle.tsv")).unwrap();
    assert!(table.starts_with("factor\tbin\tmin\tmax\tsize\tmean_pass@1\n"));
    // Every bin of the oracle scores 1.
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.ends_with("\t1.0000")), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report-oracle.json")).unwrap()).unwrap();
    assert_eq!(report["breakdowns"].as_object().unwrap().len(), 4);
}

#[test]
fn serve_study_answers_and_refuses_without_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = benchgen(&cfg, &["serve-study", "--addr", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");

    let cfg = with_fixture_dataset(dir.path(), "");
    let mut child = Command::new(env!("CARGO_BIN_EXE_benchgen"))
        .arg("--config")
        .arg(&cfg)
        .args(["serve-study", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("{line}")).to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"examples\":7"), "{resp}");
}
