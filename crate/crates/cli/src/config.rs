//! The run configuration file.
//!
//! Relative paths are resolved against the directory of the config file.
//! Every path named in the file must exist when it is loaded, except the
//! output directory and a transcript that is about to be recorded.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use benchgen_core::eval::EvalConfig;
use benchgen_core::llm::{ProviderConfig, ReplayMode, Sampling};
use benchgen_core::pipeline::{PipelineConfig, StageSampling};
use serde::Deserialize;

/// A problem with the configuration or the command line; exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replay {
    /// Talk to the providers, record nothing.
    #[default]
    Off,
    Record,
    /// Serve recorded answers, asking the provider on a miss.
    Replay,
    /// Serve recorded answers only.
    ReplayStrict,
}

impl Replay {
    pub fn mode(self) -> Option<ReplayMode> {
        match self {
            Replay::Off => None,
            Replay::Record => Some(ReplayMode::Record),
            Replay::Replay => Some(ReplayMode::Replay),
            Replay::ReplayStrict => Some(ReplayMode::ReplayStrict),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Installer {
    #[default]
    Pip,
    /// Writes placeholder packages that only carry a version; for tests.
    Stub,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutorSection {
    pub python: PathBuf,
    /// Runner shim script, started with `python`.
    pub shim: Option<PathBuf>,
    pub installer: Installer,
    /// Where dependency environments are cached; `<output_dir>/envs` by
    /// default.
    pub env_root: Option<PathBuf>,
    pub pipeline_timeout_secs: f64,
    pub network_jail: bool,
}

impl Default for ExecutorSection {
    fn default() -> Self {
        ExecutorSection {
            python: "python3".into(),
            shim: None,
            installer: Installer::Pip,
            env_root: None,
            pipeline_timeout_secs: 30.0,
            network_jail: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Caps {
    pub regenerations: u32,
    pub debug_iters: u32,
    pub augment_k: u32,
}

impl Default for Caps {
    fn default() -> Self {
        Caps { regenerations: 3, debug_iters: 3, augment_k: 5 }
    }
}

/// Keyword lists, one keyword per line.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordFiles {
    pub io: Option<PathBuf>,
    pub banned: Option<PathBuf>,
}

/// How to reach a model alias.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum ModelSpec {
    /// An OpenAI-style chat-completions endpoint.
    Http(ProviderConfig),
    /// Canned answers from a rule file.
    Scripted { script: PathBuf },
    /// The ground truth of each example; evaluation only.
    Oracle,
    /// Always answers with nothing; evaluation only.
    Empty,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageAliases {
    pub sandbox: Option<String>,
    pub tests: Option<String>,
    pub debug: Option<String>,
    pub instruction: Option<String>,
    /// Without it, examples keep only their generated tests.
    pub augment: Option<String>,
    /// Default model for `evaluate`.
    pub eval: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub sandbox: Option<Sampling>,
    pub tests: Option<Sampling>,
    pub debug: Option<Sampling>,
    pub instruction: Option<Sampling>,
    pub augment: Option<Sampling>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub addr: String,
    pub static_dir: Option<PathBuf>,
    /// Stderr lines shown per test set; participants see far more than
    /// the models do by default.
    pub stderr_lines: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection { addr: "127.0.0.1:8080".into(), static_dir: None, stderr_lines: 200 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Maximum fragments read from the corpus.
    pub limit: Option<usize>,
    /// Worker threads; 0 lets the pools size themselves.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub replay: Replay,
    /// Transcript of model exchanges; `<output_dir>/transcript` by default.
    pub transcript: Option<PathBuf>,
    /// Directory of prompt templates overriding the bundled ones.
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub executor: ExecutorSection,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default)]
    pub keywords: KeywordFiles,
    #[serde(default)]
    pub models: BTreeMap<String, ModelSpec>,
    #[serde(default)]
    pub stages: StageAliases,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub study: StudySection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Built-in aliases usable by `evaluate` without a `[models]` entry.
pub const BUILTIN_MODELS: [&str; 2] = ["oracle", "empty"];

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("reading {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| config_err(format!("parsing {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.corpus);
        fix(&mut self.output_dir);
        fix_opt(&mut self.transcript);
        fix_opt(&mut self.templates);
        fix_opt(&mut self.executor.shim);
        fix_opt(&mut self.executor.env_root);
        fix_opt(&mut self.keywords.io);
        fix_opt(&mut self.keywords.banned);
        fix_opt(&mut self.study.static_dir);
        for spec in self.models.values_mut() {
            if let ModelSpec::Scripted { script } = spec {
                fix(script);
            }
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        let must_exist = |what: &str, p: &Option<PathBuf>| -> anyhow::Result<()> {
            match p {
                Some(p) if !p.exists() => Err(config_err(format!("{what} {} does not exist", p.display()))),
                _ => Ok(()),
            }
        };
        must_exist("corpus", &self.corpus)?;
        must_exist("templates directory", &self.templates)?;
        must_exist("runner shim", &self.executor.shim)?;
        must_exist("io keyword list", &self.keywords.io)?;
        must_exist("banned keyword list", &self.keywords.banned)?;
        must_exist("study static directory", &self.study.static_dir)?;
        if self.replay == Replay::ReplayStrict {
            must_exist("transcript", &Some(self.transcript_path()))?;
        }
        for (alias, spec) in &self.models {
            if let ModelSpec::Scripted { script } = spec {
                must_exist(&format!("script of model `{alias}`"), &Some(script.clone()))?;
            }
        }
        let stages = [
            ("sandbox", &self.stages.sandbox),
            ("tests", &self.stages.tests),
            ("debug", &self.stages.debug),
            ("instruction", &self.stages.instruction),
            ("augment", &self.stages.augment),
            ("eval", &self.stages.eval),
        ];
        for (stage, alias) in stages {
            if let Some(a) = alias {
                if !self.models.contains_key(a) && !(stage == "eval" && BUILTIN_MODELS.contains(&a.as_str())) {
                    return Err(config_err(format!("stage `{stage}` uses unknown model alias `{a}`")));
                }
            }
        }
        if !(self.executor.pipeline_timeout_secs > 0.0) {
            return Err(config_err("executor.pipeline_timeout_secs must be positive"));
        }
        self.eval.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.transcript.clone().unwrap_or_else(|| self.output_dir.join("transcript"))
    }

    pub fn env_root(&self) -> PathBuf {
        self.executor.env_root.clone().unwrap_or_else(|| self.output_dir.join("envs"))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn pipeline_config(&self) -> anyhow::Result<PipelineConfig> {
        let defaults = StageSampling::default();
        let s = &self.sampling;
        let mut augment = s.augment.unwrap_or(defaults.augment);
        augment.n = self.caps.augment_k;
        let mut cfg = PipelineConfig {
            regeneration_cap: self.caps.regenerations,
            debug_iterations: self.caps.debug_iters,
            sampling: StageSampling {
                sandbox: s.sandbox.unwrap_or(defaults.sandbox),
                tests: s.tests.unwrap_or(defaults.tests),
                debug: s.debug.unwrap_or(defaults.debug),
                instruction: s.instruction.unwrap_or(defaults.instruction),
                augment,
            },
            timeout: Duration::from_secs_f64(self.executor.pipeline_timeout_secs),
            jobs: self.jobs,
            ..PipelineConfig::default()
        };
        if let Some(p) = &self.keywords.io {
            cfg.io_keywords = read_keywords(p)?;
        }
        if let Some(p) = &self.keywords.banned {
            cfg.banned_keywords = read_keywords(p)?;
        }
        Ok(cfg)
    }
}

/// One keyword per non-blank line.
pub fn read_keywords(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("reading {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}
