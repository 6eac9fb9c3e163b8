use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::example::EvalExample;
use crate::corpus::first_keyword_match;
use crate::executor::{merge_requirements, EnvError, EnvironmentManager, Executor, MergedRequirements, Overall};

/// Keywords banning destructive or stateful operations, matched as
/// substrings. Not complete: it screens the common cases only.
pub const BANNED_KEYWORDS: [&str; 36] = [
    "os.kill",
    "terminate",
    "subprocess.call(['kill',",
    "subprocess.call(['rm',",
    "subprocess.call(['rmdir',",
    "subprocess.call([\"kill\",",
    "subprocess.call([\"rm\",",
    "subprocess.call([\"rmdir\",",
    "sys.exit",
    "os.unlink",
    ".unlink",
    ".rmdir",
    "os.remove",
    "os.removedirs",
    "os.rmdir",
    "os.system",
    "rmtree",
    "send2trash",
    "open(",
    ".read",
    ".write",
    ".load",
    ".dump",
    "shutil.",
    "glob.",
    "os.path.",
    "os.remove(",
    "os.rename(",
    "os.rmdir(",
    "os.mkdir(",
    "os.makedirs(",
    "os.listdir(",
    ".readlines(",
    ".writelines(",
    ".seek(",
    ".tell(",
];

pub fn default_banned_keywords() -> Vec<String> {
    BANNED_KEYWORDS.iter().map(|s| s.to_string()).collect()
}

/// Reason recorded for examples failing in the shared environment.
pub const SHARED_ENV_FAILURE: &str = "shared_env_failure";

/// First banned keyword found in the example's context, target or tests.
pub fn banned_keyword<'k>(example: &EvalExample, banned: &'k [String]) -> Option<&'k str> {
    let mut texts = vec![example.context.as_str(), example.target.as_str()];
    texts.extend(example.test_sets.iter().map(|t| t.code.as_str()));
    first_keyword_match(&texts, banned)
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("building the shared environment: {0}")]
    Environment(#[from] EnvError),
    #[error("infrastructure failure re-executing `{example}`: {message}")]
    Infrastructure { example: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<EvalExample>,
    pub dropped: Vec<(String, String)>,
    pub merged: MergedRequirements,
}

/// Drops examples with a banned keyword, then installs the merged
/// dependency list once and re-runs every remaining example's test sets
/// against its ground truth, dropping failures.
pub fn final_filter(
    examples: Vec<EvalExample>,
    executor: &Executor,
    envs: &EnvironmentManager,
    banned: &[String],
    timeout: Duration,
) -> Result<FilterOutcome, FilterError> {
    let mut dropped = Vec::new();
    let mut survivors = Vec::new();
    for ex in examples {
        match banned_keyword(&ex, banned) {
            Some(kw) => dropped.push((ex.id.clone(), kw.to_string())),
            None => survivors.push(ex),
        }
    }
    let merged = merge_requirements(survivors.iter().map(|e| e.dependencies.as_slice()))?;
    for (package, lost, kept) in &merged.overridden {
        log::warn!("shared environment: {package}: `{lost}` overridden by `{kept}`");
    }
    let env = envs.build(&merged.requirements)?;

    let verdicts: Vec<Result<bool, FilterError>> = survivors
        .par_iter()
        .map(|ex| {
            let program = ex.assemble();
            let codes = ex.test_codes();
            let mut overall = executor.execute_all_sets(&program, &codes, &env, timeout, false).0;
            if overall == Overall::Infra {
                overall = executor.execute_all_sets(&program, &codes, &env, timeout, false).0;
            }
            match overall {
                Overall::Pass => Ok(true),
                Overall::Fail => Ok(false),
                Overall::Infra => Err(FilterError::Infrastructure {
                    example: ex.id.clone(),
                    message: "re-execution failed twice".into(),
                }),
            }
        })
        .collect();
    let mut kept = Vec::new();
    for (ex, verdict) in survivors.into_iter().zip(verdicts) {
        if verdict? {
            kept.push(ex);
        } else {
            dropped.push((ex.id.clone(), SHARED_ENV_FAILURE.to_string()));
        }
    }
    Ok(FilterOutcome { kept, dropped, merged })
}
