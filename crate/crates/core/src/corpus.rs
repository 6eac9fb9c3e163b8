//! Corpus ingestion and the pre-pipeline keyword filter.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::dedent;
use crate::python::syntax;

/// A harvested function with its whole source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFragment {
    pub id: String,
    pub repo: String,
    pub path: String,
    pub function_name: String,
    pub signature: String,
    pub docstring: String,
    pub body: String,
    pub file_context: String,
    pub license: Option<String>,
}

/// Stable key of a fragment: `repo:path:function_name`.
pub fn stable_id(repo: &str, path: &str, function_name: &str) -> String {
    format!("{repo}:{path}:{function_name}")
}

/// Default I/O keyword list for the pre-filter: the file-system entries of
/// the post-filter banned list.
pub const DEFAULT_IO_KEYWORDS: [&str; 18] = [
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

pub fn default_io_keywords() -> Vec<String> {
    DEFAULT_IO_KEYWORDS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading corpus {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Fragments read from a corpus file plus a tally of skipped records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOutcome {
    pub fragments: Vec<SourceFragment>,
    pub skipped: usize,
    /// Skip count per reason.
    pub skip_reasons: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    repo: Option<String>,
    path: Option<String>,
    function_name: Option<String>,
    signature: Option<String>,
    docstring: Option<String>,
    body: Option<String>,
    file_context: Option<String>,
    license: Option<String>,
}

fn to_fragment(line: &str) -> Result<SourceFragment, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|_| "malformed_record".to_string())?;
    let need = |v: Option<String>, field: &str| v.ok_or_else(|| format!("missing_{field}"));
    let repo = need(raw.repo, "repo")?;
    let path = need(raw.path, "path")?;
    let function_name = need(raw.function_name, "function_name")?;
    let signature = need(raw.signature, "signature")?;
    let docstring = need(raw.docstring, "docstring")?;
    let body = need(raw.body, "body")?;
    let file_context = need(raw.file_context, "file_context")?;
    if body.trim().is_empty() {
        return Err("empty_body".into());
    }
    if !signature_parses(&signature) {
        return Err("bad_signature".into());
    }
    if !file_context.is_empty() && !file_context.contains(&signature) {
        return Err("signature_not_in_context".into());
    }
    let id = match raw.id {
        Some(id) if !id.trim().is_empty() => id,
        _ => stable_id(&repo, &path, &function_name),
    };
    Ok(SourceFragment { id, repo, path, function_name, signature, docstring, body, file_context, license: raw.license })
}

/// Whether `signature` is a function header: followed by an indented
/// `pass` it must parse to a single function definition.
pub fn signature_parses(signature: &str) -> bool {
    let header = dedent(signature);
    let header = header.trim_end();
    let starts_def = header
        .lines()
        .find(|l| !l.trim_start().starts_with('@'))
        .is_some_and(|l| l.starts_with("def ") || l.starts_with("async def "));
    if !starts_def || !header.ends_with(':') {
        return false;
    }
    let probe = format!("{header}\n    pass\n");
    let Ok(tree) = syntax::parse_checked(&probe) else {
        return false;
    };
    let root = tree.root_node();
    root.named_child_count() == 1
        && root
            .named_child(0)
            .is_some_and(|n| n.kind() == "function_definition" || n.kind() == "decorated_definition")
}

/// Reads up to `limit` fragments in file order. Records that are not valid
/// JSON, lack a field or violate a fragment invariant are skipped and
/// tallied.
pub fn load_fragments(corpus_path: &Path, limit: Option<usize>) -> Result<LoadOutcome, CorpusError> {
    let io_err = |source| CorpusError::Io { path: corpus_path.display().to_string(), source };
    let file = File::open(corpus_path).map_err(io_err)?;
    let mut out = LoadOutcome::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        if limit.is_some_and(|l| out.fragments.len() >= l) {
            break;
        }
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match to_fragment(&line) {
            Ok(f) => out.fragments.push(f),
            Err(reason) => {
                log::warn!("{}:{}: skipping record ({reason})", corpus_path.display(), lineno + 1);
                out.skipped += 1;
                *out.skip_reasons.entry(reason).or_default() += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Drop(String),
}

/// Reason given for fragments without file context.
pub const MISSING_CONTEXT: &str = "missing_context";

/// The keyword occurring earliest across `texts` (scanned in order). Ties at
/// one position go to the longest keyword, then the lexicographically
/// smallest, so the answer does not depend on the order of `keywords`.
pub fn first_keyword_match<'k>(texts: &[&str], keywords: &'k [String]) -> Option<&'k str> {
    for text in texts {
        let mut best: Option<(usize, &str)> = None;
        for kw in keywords.iter().filter(|k| !k.is_empty()) {
            if let Some(pos) = text.find(kw.as_str()) {
                let better = match best {
                    None => true,
                    Some((bp, bk)) => {
                        pos < bp || (pos == bp && (kw.len() > bk.len() || (kw.len() == bk.len() && kw.as_str() < bk)))
                    }
                };
                if better {
                    best = Some((pos, kw.as_str()));
                }
            }
        }
        if let Some((_, kw)) = best {
            return Some(kw);
        }
    }
    None
}

/// Drops fragments without file context or with an I/O keyword in the
/// body or the file.
pub fn prefilter(frag: &SourceFragment, io_keywords: &[String]) -> Decision {
    if frag.file_context.trim().is_empty() {
        return Decision::Drop(MISSING_CONTEXT.to_string());
    }
    match first_keyword_match(&[&frag.body, &frag.file_context], io_keywords) {
        Some(kw) => Decision::Drop(kw.to_string()),
        None => Decision::Keep,
    }
}
