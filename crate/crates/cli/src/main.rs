//! `benchgen`: build an execution-based benchmark from a code corpus,
//! evaluate code generators against it, analyze the results and host the
//! human study.
//!
//! Exit codes: 0 success, 1 finished but some inputs were rejected or
//! failed, 2 configuration error, 3 infrastructure failure.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use benchgen_core::analysis::{breakdown_by_factor, example_metrics, render_breakdowns, BreakdownFactor, PassReport};
use benchgen_core::corpus::load_fragments;
use benchgen_core::eval::{
    accuracy_by_round, evaluate, refine_all, render_accuracy, ChatGenerator, EmptyGenerator, EvalConfig, Generator,
    OracleGenerator,
};
use benchgen_core::executor::{
    merge_requirements, Environment, EnvironmentManager, Executor, PackageInstaller, PipInstaller, ShimLauncher,
    StubInstaller,
};
use benchgen_core::llm::{ChatModel, Gateway, GatewayError, HttpChatClient, ScriptRule, ScriptedModel, Transcript};
use benchgen_core::pipeline::{
    dataset_to_jsonl, read_dataset, EvalExample, ExecContext, ModelHandle, Pipeline, StageModels, Templates,
};
use clap::{Parser, Subcommand};
use config::{config_err, ConfigError, Installer, ModelSpec, Replay, RunConfig, BUILTIN_MODELS};

#[derive(Parser)]
#[command(name = "benchgen", version, about = "Execution-based code generation benchmark toolkit")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "benchgen.toml")]
    config: PathBuf,
    /// Worker threads, overriding the config file.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read and validate the corpus; writes `fragments.jsonl`.
    Ingest,
    /// Run the construction pipeline; writes `dataset.jsonl` and the funnel.
    Generate,
    /// Score a model on the dataset.
    Evaluate {
        /// Model alias; defaults to `stages.eval`.
        #[arg(long)]
        model: Option<String>,
        /// Run the refinement protocol with this many revisions instead of
        /// plain sampling.
        #[arg(long)]
        rounds: Option<u32>,
    },
    /// Compute per-example metrics and pass@1 breakdowns.
    Analyze {
        /// Only compute metrics; no evaluation results needed.
        #[arg(long)]
        metrics_only: bool,
    },
    /// Host the human study over the dataset.
    ServeStudy {
        #[arg(long)]
        addr: Option<String>,
    },
}

/// Whether a finished command rejected or failed some of its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Finished {
    Clean,
    Partial,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Finished::Clean) => ExitCode::SUCCESS,
        Ok(Finished::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Finished> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if cfg.jobs > 0 {
        // Sizes the global pool used by evaluation.
        std::env::set_var("RAYON_NUM_THREADS", cfg.jobs.to_string());
    }
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    match cli.command {
        Command::Ingest => ingest(&cfg),
        Command::Generate => generate(&cfg),
        Command::Evaluate { model, rounds } => evaluate_cmd(&cfg, model, rounds),
        Command::Analyze { metrics_only } => analyze(&cfg, metrics_only),
        Command::ServeStudy { addr } => serve_study(&cfg, addr),
    }
}

fn ingest(cfg: &RunConfig) -> anyhow::Result<Finished> {
    let corpus = cfg.corpus.as_ref().ok_or_else(|| config_err("`corpus` is not set"))?;
    let loaded = load_fragments(corpus, cfg.limit)?;
    let mut out = String::new();
    for f in &loaded.fragments {
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    write_artifact(cfg, "fragments.jsonl", &out)?;
    println!("kept {} fragments, skipped {}", loaded.fragments.len(), loaded.skipped);
    for (reason, n) in &loaded.skip_reasons {
        println!("  {reason}: {n}");
    }
    Ok(if loaded.skipped > 0 { Finished::Partial } else { Finished::Clean })
}

fn generate(cfg: &RunConfig) -> anyhow::Result<Finished> {
    let corpus = cfg.corpus.as_ref().ok_or_else(|| config_err("`corpus` is not set"))?;
    let fragments = load_fragments(corpus, cfg.limit)?.fragments;
    let mut clients = Clients::new(cfg)?;
    let required = |stage: &str, alias: &Option<String>| {
        alias.clone().ok_or_else(|| config_err(format!("`stages.{stage}` is not set")))
    };
    let models = StageModels {
        sandbox: clients.handle(&required("sandbox", &cfg.stages.sandbox)?)?,
        tests: clients.handle(&required("tests", &cfg.stages.tests)?)?,
        debug: clients.handle(&required("debug", &cfg.stages.debug)?)?,
        instruction: clients.handle(&required("instruction", &cfg.stages.instruction)?)?,
        augment: cfg.stages.augment.as_deref().map(|a| clients.handle(a)).transpose()?,
    };
    let templates = match &cfg.templates {
        Some(dir) => Templates::load_dir(dir).map_err(|e| config_err(e.to_string()))?,
        None => Templates::bundled(),
    };
    let pipeline = Pipeline {
        config: cfg.pipeline_config()?,
        models,
        templates,
        executor: executor(cfg)?,
        envs: environments(cfg),
    };
    let out = pipeline.run(&fragments)?;
    write_artifact(cfg, "dataset.jsonl", &dataset_to_jsonl(&out.emitted))?;
    write_artifact(cfg, "funnel.txt", &out.report.render_text())?;
    write_artifact(cfg, "funnel.json", &out.report.to_json())?;
    write_artifact(cfg, "states.json", &serde_json::to_string_pretty(&out.states)?)?;
    print!("{}", out.report.render_text());
    println!("emitted {} of {} fragments", out.emitted.len(), out.report.total);
    Ok(if out.emitted.len() < out.report.total { Finished::Partial } else { Finished::Clean })
}

fn evaluate_cmd(cfg: &RunConfig, model: Option<String>, rounds: Option<u32>) -> anyhow::Result<Finished> {
    let alias = model
        .or_else(|| cfg.stages.eval.clone())
        .ok_or_else(|| config_err("no model given: pass --model or set `stages.eval`"))?;
    let dataset = load_dataset(cfg)?;
    let generator: Box<dyn Generator> = match (cfg.models.get(&alias), alias.as_str()) {
        (Some(ModelSpec::Oracle), _) | (None, "oracle") => Box::new(OracleGenerator),
        (Some(ModelSpec::Empty), _) | (None, "empty") => Box::new(EmptyGenerator),
        (Some(_), _) => Box::new(ChatGenerator::new(Clients::new(cfg)?.handle(&alias)?)),
        (None, _) => {
            return Err(config_err(format!("unknown model alias `{alias}`; known: {}", known_aliases(cfg).join(", "))))
        }
    };
    let executor = executor(cfg)?;
    let envs = environments(cfg);
    let env = dataset_environment(&envs, &dataset)?;
    let exec = ExecContext { executor: &executor, env: &env, timeout: cfg.eval.timeout() };
    let tag = file_tag(&alias);

    if let Some(rounds) = rounds {
        let ecfg = EvalConfig { max_rounds: rounds, ..cfg.eval.clone() };
        let trajectories = refine_all(&dataset, generator.as_ref(), &ecfg, &exec)?;
        let accuracy = accuracy_by_round(&trajectories, rounds)?;
        let mut lines = String::new();
        for t in &trajectories {
            lines.push_str(&serde_json::to_string(t)?);
            lines.push('\n');
        }
        write_artifact(cfg, &format!("trajectories-{tag}.jsonl"), &lines)?;
        let table = render_accuracy(&alias, &accuracy);
        write_artifact(cfg, &format!("accuracy-{tag}.tsv"), &table)?;
        print!("{table}");
        return Ok(Finished::Clean);
    }

    let mut evaluation = evaluate(&dataset, generator.as_ref(), &cfg.eval, &exec)?;
    evaluation.report.model_id = alias.clone();
    let mut lines = String::new();
    for s in &evaluation.samples {
        lines.push_str(&serde_json::to_string(s)?);
        lines.push('\n');
    }
    write_artifact(cfg, &format!("samples-{tag}.jsonl"), &lines)?;
    write_artifact(cfg, &format!("report-{tag}.json"), &serde_json::to_string_pretty(&evaluation.report)?)?;
    print!("{}", PassReport::render_table(std::slice::from_ref(&evaluation.report)));
    Ok(Finished::Clean)
}

fn analyze(cfg: &RunConfig, metrics_only: bool) -> anyhow::Result<Finished> {
    let dataset = load_dataset(cfg)?;
    let mut metrics = BTreeMap::new();
    let mut failures = 0;
    let mut lines = String::new();
    for ex in &dataset {
        match example_metrics(ex) {
            Ok(m) => {
                lines.push_str(&serde_json::to_string(&serde_json::json!({ "example_id": ex.id, "metrics": m }))?);
                lines.push('\n');
                metrics.insert(ex.id.clone(), m);
            }
            Err(e) => {
                log::warn!("metrics of `{}` failed: {e}", ex.id);
                failures += 1;
            }
        }
    }
    write_artifact(cfg, "analysis.jsonl", &lines)?;
    println!("metrics for {} of {} examples", metrics.len(), dataset.len());
    if !metrics_only {
        let reports = read_reports(&cfg.output_dir)?;
        if reports.is_empty() {
            return Err(config_err(format!(
                "no evaluation reports in {}; run `evaluate` first or pass --metrics-only",
                cfg.output_dir.display()
            )));
        }
        for (path, mut report) in reports {
            let pass_at_1 = report.pass_at_1_by_example();
            for factor in BreakdownFactor::ALL {
                report.breakdowns.insert(factor, breakdown_by_factor(&metrics, &pass_at_1, factor)?);
            }
            let table = render_breakdowns(&report.breakdowns);
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            write_artifact(cfg, &format!("breakdown-{}.tsv", file_tag(&report.model_id)), &table)?;
            println!("\n{}", report.model_id);
            print!("{table}");
        }
    }
    Ok(if failures > 0 { Finished::Partial } else { Finished::Clean })
}

fn serve_study(cfg: &RunConfig, addr: Option<String>) -> anyhow::Result<Finished> {
    let dataset = load_dataset(cfg)?;
    let executor = executor(cfg)?;
    let envs = environments(cfg);
    let env = dataset_environment(&envs, &dataset)?;
    let study = benchgen_studyserver::StudyConfig {
        dataset,
        store_dir: cfg.output_dir.clone(),
        executor,
        env,
        timeout: cfg.eval.timeout(),
        stderr_lines: cfg.study.stderr_lines,
        static_dir: cfg.study.static_dir.clone(),
    };
    let addr = addr.unwrap_or_else(|| cfg.study.addr.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(benchgen_studyserver::serve(study, &addr, |local| {
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
    }))?;
    Ok(Finished::Clean)
}

/// Chat clients per alias, shared between stages and recorded to one
/// transcript.
struct Clients<'a> {
    cfg: &'a RunConfig,
    transcript: Option<Arc<Transcript>>,
    built: BTreeMap<String, Arc<dyn ChatModel>>,
}

impl<'a> Clients<'a> {
    fn new(cfg: &'a RunConfig) -> anyhow::Result<Self> {
        let path = cfg.transcript_path();
        let transcript = match cfg.replay {
            Replay::Off => None,
            Replay::Record => {
                if path.exists() {
                    fs::remove_file(&path).with_context(|| format!("clearing {}", path.display()))?;
                }
                Some(Transcript::new().with_sink(&path)?)
            }
            Replay::Replay => Some(Transcript::load(&path)?.with_sink(&path)?),
            Replay::ReplayStrict => Some(Transcript::load(&path)?),
        };
        Ok(Clients { cfg, transcript: transcript.map(Arc::new), built: BTreeMap::new() })
    }

    fn handle(&mut self, alias: &str) -> anyhow::Result<ModelHandle> {
        if let Some(c) = self.built.get(alias) {
            return Ok(ModelHandle::new(alias, c.clone()));
        }
        let spec = self.cfg.models.get(alias).ok_or_else(|| config_err(format!("unknown model alias `{alias}`")))?;
        let strict = self.cfg.replay == Replay::ReplayStrict;
        let backend: Option<Arc<dyn ChatModel>> = match spec {
            _ if strict => None,
            ModelSpec::Http(p) => match HttpChatClient::new(p.clone()) {
                Ok(c) => Some(Arc::new(c)),
                Err(e @ GatewayError::MissingCredentials(_)) => return Err(config_err(e.to_string())),
                Err(e) => return Err(e.into()),
            },
            ModelSpec::Scripted { script } => Some(Arc::new(ScriptedModel::new(read_script(script)?))),
            ModelSpec::Oracle | ModelSpec::Empty => {
                return Err(config_err(format!("model `{alias}` cannot answer chat requests")))
            }
        };
        let client: Arc<dyn ChatModel> = match (&self.transcript, backend) {
            (Some(t), backend) => {
                Arc::new(Gateway::new(backend, t.clone(), self.cfg.replay.mode().expect("replay on")))
            }
            (None, Some(b)) => b,
            (None, None) => unreachable!("strict replay always has a transcript"),
        };
        self.built.insert(alias.to_string(), client.clone());
        Ok(ModelHandle::new(alias, client))
    }
}

fn read_script(path: &Path) -> anyhow::Result<Vec<ScriptRule>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("script {}: {e}", path.display())))
}

fn known_aliases(cfg: &RunConfig) -> Vec<String> {
    let mut all: Vec<String> = cfg.models.keys().cloned().collect();
    all.extend(BUILTIN_MODELS.iter().map(|s| s.to_string()));
    all.sort();
    all.dedup();
    all
}

fn executor(cfg: &RunConfig) -> anyhow::Result<Arc<Executor>> {
    let script = cfg.executor.shim.clone().ok_or_else(|| config_err("`executor.shim` is not set"))?;
    let mut ex = Executor::new(ShimLauncher::Python { script });
    if !cfg.executor.network_jail {
        ex = ex.without_network_jail();
    }
    Ok(Arc::new(ex))
}

fn environments(cfg: &RunConfig) -> Arc<EnvironmentManager> {
    let installer: Arc<dyn PackageInstaller> = match cfg.executor.installer {
        Installer::Pip => Arc::new(PipInstaller { python: cfg.executor.python.clone(), index_url: None }),
        Installer::Stub => Arc::new(StubInstaller),
    };
    Arc::new(EnvironmentManager::new(cfg.env_root(), cfg.executor.python.clone(), installer))
}

/// One environment with every dependency of the dataset.
fn dataset_environment(envs: &EnvironmentManager, dataset: &[EvalExample]) -> anyhow::Result<Environment> {
    let merged = merge_requirements(dataset.iter().map(|e| e.dependencies.as_slice()))?;
    for (pkg, dropped, kept) in &merged.overridden {
        log::warn!("{pkg}: `{dropped}` conflicts with `{kept}`; keeping the latter");
    }
    Ok(envs.build(&merged.requirements)?)
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Vec<EvalExample>> {
    let path = cfg.artifact("dataset.jsonl");
    if !path.exists() {
        return Err(config_err(format!("{} does not exist; run `generate` first", path.display())));
    }
    let dataset = read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
    if dataset.is_empty() {
        return Err(config_err(format!("{} holds no examples", path.display())));
    }
    Ok(dataset)
}

/// Evaluation reports in `dir`, by file name.
fn read_reports(dir: &Path) -> anyhow::Result<Vec<(PathBuf, PassReport)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("report-") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let report =
                serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("reading {}", p.display()))?;
            Ok((p, report))
        })
        .collect()
}

/// Alias made safe for a file name.
fn file_tag(alias: &str) -> String {
    alias.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn write_artifact(cfg: &RunConfig, name: &str, content: &str) -> anyhow::Result<()> {
    let path = cfg.artifact(name);
    fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_tags_are_plain() {
        assert_eq!(file_tag("gpt-4/turbo v2"), "gpt-4_turbo_v2");
        assert_eq!(file_tag("oracle"), "oracle");
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from(["benchgen", "--config", "x.toml", "evaluate", "--model", "m", "--rounds", "4"])
            .unwrap();
        assert!(matches!(cli.command, Command::Evaluate { rounds: Some(4), .. }));
        let cli = Cli::try_parse_from(["benchgen", "analyze", "--metrics-only", "--jobs", "2"]).unwrap();
        assert_eq!(cli.jobs, Some(2));
        assert!(Cli::try_parse_from(["benchgen", "frobnicate"]).is_err());
    }
}
