#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use benchgen_core::corpus::{load_fragments, SourceFragment};
use benchgen_core::executor::{EnvironmentManager, Executor, ShimLauncher, StubInstaller};
use benchgen_core::llm::{ChatModel, Gateway, ReplayMode, ScriptRule, ScriptedModel, Transcript};
use benchgen_core::pipeline::{ModelHandle, Pipeline, PipelineConfig, StageModels, Templates};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn replay_dir() -> PathBuf {
    fixtures().join("replay")
}

pub fn shim_script() -> PathBuf {
    fixtures().join("shim/runner_shim.py")
}

pub fn shim_available() -> bool {
    shim_script().exists()
        && std::process::Command::new("python3").arg("--version").output().is_ok_and(|o| o.status.success())
}

pub fn executor() -> Arc<Executor> {
    Arc::new(Executor::new(ShimLauncher::Python { script: shim_script() }))
}

pub fn stub_envs(root: &Path) -> Arc<EnvironmentManager> {
    Arc::new(EnvironmentManager::new(root, "python3", Arc::new(StubInstaller)))
}

pub fn replay_fragments() -> Vec<SourceFragment> {
    load_fragments(&replay_dir().join("corpus.jsonl"), None).expect("replay corpus").fragments
}

pub fn script_rules() -> Vec<ScriptRule> {
    serde_json::from_str(&std::fs::read_to_string(replay_dir().join("script.json")).unwrap()).unwrap()
}

/// Model alias used throughout the replay fixture.
pub const FIXTURE_MODEL: &str = "fixture-model";

pub fn pipeline_with(client: Arc<dyn ChatModel>, envs: Arc<EnvironmentManager>) -> Pipeline {
    Pipeline {
        config: PipelineConfig::default(),
        models: StageModels::uniform(ModelHandle::new(FIXTURE_MODEL, client)),
        templates: Templates::bundled(),
        executor: executor(),
        envs,
    }
}

/// Pipeline answering from the recorded transcript only.
pub fn replay_pipeline(envs: Arc<EnvironmentManager>) -> Pipeline {
    let transcript = Transcript::load(&replay_dir().join("transcript.jsonl")).expect("recorded transcript");
    let gateway = Gateway::new(None, Arc::new(transcript), ReplayMode::ReplayStrict);
    pipeline_with(Arc::new(gateway), envs)
}

/// Pipeline answering from the scripted rules, recording to `sink`.
pub fn recording_pipeline(envs: Arc<EnvironmentManager>, sink: &Path) -> Pipeline {
    let scripted: Arc<dyn ChatModel> = Arc::new(ScriptedModel::new(script_rules()));
    let transcript = Transcript::new().with_sink(sink).expect("transcript sink");
    let gateway = Gateway::new(Some(scripted), Arc::new(transcript), ReplayMode::Record);
    pipeline_with(Arc::new(gateway), envs)
}

/// The dataset emitted by the replay fixture.
pub fn fixture_dataset() -> Vec<benchgen_core::pipeline::EvalExample> {
    benchgen_core::pipeline::read_dataset(&replay_dir().join("dataset.jsonl")).expect("fixture dataset")
}

/// One environment holding every dependency of `dataset`.
pub fn dataset_env(
    envs: &EnvironmentManager,
    dataset: &[benchgen_core::pipeline::EvalExample],
) -> benchgen_core::executor::Environment {
    let merged =
        benchgen_core::executor::merge_requirements(dataset.iter().map(|e| e.dependencies.as_slice())).unwrap();
    envs.build(&merged.requirements).unwrap()
}

/// A chat-style answer wrapping `code` in a python fence.
pub fn fenced(code: &str) -> String {
    format!("Here you go.\n```python\n{code}```\n")
}

/// A body that compiles but crashes with a call missing an argument.
pub const MISSING_ARG_BODY: &str = "def pick(a, b):\n    return a\nreturn pick(1)\n";

/// A body that runs but fails every value check.
pub const WRONG_BODY: &str = "return None\n";
