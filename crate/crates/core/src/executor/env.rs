//! Shared dependency environments.
//!
//! An environment is a directory of installed packages put on the
//! interpreter's import path. Environments are keyed by the hash of their
//! normalized requirement list, so identical lists reuse one build.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use parking_lot::Mutex;
use sha2::{Digest, Sha256};

/// A parsed requirement line such as `numpy>=1.20,<2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Requirement {
    /// Normalized distribution name (lowercase, `_`/`.` folded to `-`).
    pub name: String,
    pub specifiers: Vec<Specifier>,
    /// The line as written (trimmed).
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Eq,
    Ne,
    Ge,
    Gt,
    Le,
    Lt,
    Compatible,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Specifier {
    pub op: Operator,
    pub version: Version,
}

/// Release segment of a version (`1.2.3`); suffixes are ignored. Missing
/// trailing segments count as zero, so `1.0 == 1`.
#[derive(Debug, Clone)]
pub struct Version(pub Vec<u64>);

impl PartialEq for Version {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Version {}

impl Version {
    pub fn parse(s: &str) -> Option<Version> {
        let s = s.trim().trim_start_matches(['v', 'V']);
        let mut parts = Vec::new();
        for seg in s.split('.') {
            let digits: String = seg.chars().take_while(char::is_ascii_digit).collect();
            if digits.is_empty() {
                if seg == "*" {
                    break;
                }
                return if parts.is_empty() { None } else { Some(Version(parts)) };
            }
            parts.push(digits.parse().ok()?);
            if digits.len() != seg.len() {
                break;
            }
        }
        (!parts.is_empty()).then_some(Version(parts))
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        let len = self.0.len().max(other.0.len());
        for i in 0..len {
            let a = self.0.get(i).copied().unwrap_or(0);
            let b = other.0.get(i).copied().unwrap_or(0);
            match a.cmp(&b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        Ordering::Equal
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RequirementError {
    #[error("cannot parse requirement `{0}`")]
    Malformed(String),
}

pub fn normalize_name(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace(['_', '.'], "-")
}

impl Requirement {
    pub fn parse(line: &str) -> Result<Requirement, RequirementError> {
        let raw = line.split('#').next().unwrap_or("").trim().to_string();
        let malformed = || RequirementError::Malformed(line.trim().to_string());
        // Environment markers and extras do not affect conflict checks.
        let spec_part = raw.split(';').next().unwrap_or("").trim();
        let name_end = spec_part
            .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')))
            .unwrap_or(spec_part.len());
        let name = &spec_part[..name_end];
        if name.is_empty() {
            return Err(malformed());
        }
        let mut rest = spec_part[name_end..].trim();
        if rest.starts_with('[') {
            let close = rest.find(']').ok_or_else(malformed)?;
            rest = rest[close + 1..].trim();
        }
        let mut specifiers = Vec::new();
        for clause in rest.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            let (op, ver) = [
                ("~=", Operator::Compatible),
                ("==", Operator::Eq),
                ("!=", Operator::Ne),
                (">=", Operator::Ge),
                ("<=", Operator::Le),
                (">", Operator::Gt),
                ("<", Operator::Lt),
            ]
            .iter()
            .find_map(|(sym, op)| clause.strip_prefix(sym).map(|v| (*op, v)))
            .ok_or_else(malformed)?;
            let version = Version::parse(ver.trim_start_matches('=')).ok_or_else(malformed)?;
            specifiers.push(Specifier { op, version });
        }
        Ok(Requirement { name: normalize_name(name), specifiers, raw })
    }
}

#[derive(Debug, Clone)]
struct Bound {
    version: Version,
    inclusive: bool,
}

/// Whether a set of specifiers for one package admits at least one version.
/// Versions are compared on release segments; `!=` only excludes when it
/// hits the single remaining pinned version.
pub fn specifiers_satisfiable(specs: &[&Specifier]) -> bool {
    let mut lower: Option<Bound> = None;
    let mut upper: Option<Bound> = None;
    let mut pin: Option<&Version> = None;
    let mut excluded: Vec<&Version> = Vec::new();

    let tighten_lower = |lower: &mut Option<Bound>, b: Bound| {
        let replace = match lower {
            None => true,
            Some(cur) => b.version > cur.version || (b.version == cur.version && !b.inclusive),
        };
        if replace {
            *lower = Some(b);
        }
    };
    let tighten_upper = |upper: &mut Option<Bound>, b: Bound| {
        let replace = match upper {
            None => true,
            Some(cur) => b.version < cur.version || (b.version == cur.version && !b.inclusive),
        };
        if replace {
            *upper = Some(b);
        }
    };

    for s in specs {
        match s.op {
            Operator::Eq => {
                if pin.is_some_and(|p| *p != s.version) {
                    return false;
                }
                pin = Some(&s.version);
            }
            Operator::Ne => excluded.push(&s.version),
            Operator::Ge => tighten_lower(&mut lower, Bound { version: s.version.clone(), inclusive: true }),
            Operator::Gt => tighten_lower(&mut lower, Bound { version: s.version.clone(), inclusive: false }),
            Operator::Le => tighten_upper(&mut upper, Bound { version: s.version.clone(), inclusive: true }),
            Operator::Lt => tighten_upper(&mut upper, Bound { version: s.version.clone(), inclusive: false }),
            Operator::Compatible => {
                tighten_lower(&mut lower, Bound { version: s.version.clone(), inclusive: true });
                let mut next = s.version.0.clone();
                if next.len() >= 2 {
                    next.pop();
                }
                if let Some(last) = next.last_mut() {
                    *last += 1;
                }
                tighten_upper(&mut upper, Bound { version: Version(next), inclusive: false });
            }
        }
    }

    let above = |v: &Version, b: &Bound| if b.inclusive { v >= &b.version } else { v > &b.version };
    let below = |v: &Version, b: &Bound| if b.inclusive { v <= &b.version } else { v < &b.version };
    if let Some(p) = pin {
        return lower.as_ref().is_none_or(|b| above(p, b))
            && upper.as_ref().is_none_or(|b| below(p, b))
            && !excluded.contains(&p);
    }
    match (&lower, &upper) {
        (Some(l), Some(u)) => match l.version.cmp(&u.version) {
            Ordering::Less => true,
            Ordering::Equal => l.inclusive && u.inclusive && !excluded.contains(&&l.version),
            Ordering::Greater => false,
        },
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error(transparent)]
    Requirement(#[from] RequirementError),
    #[error("conflicting requirements for `{package}`: {}", .requirements.join(" vs "))]
    Conflict { package: String, requirements: Vec<String> },
    #[error("package installation failed:\n{trace}")]
    Install { trace: String },
    #[error("environment I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EnvError {
    fn from(e: std::io::Error) -> Self {
        EnvError::Io(e.to_string())
    }
}

/// Parses, deduplicates and sorts a requirement list, rejecting lists that
/// cannot be satisfied together.
pub fn normalize_requirements(lines: &[String]) -> Result<Vec<Requirement>, EnvError> {
    let mut by_name: BTreeMap<String, Vec<Requirement>> = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let req = Requirement::parse(line)?;
        let group = by_name.entry(req.name.clone()).or_default();
        if !group.iter().any(|r| r.raw == req.raw) {
            group.push(req);
        }
    }
    let mut out = Vec::new();
    for (name, group) in by_name {
        let specs: Vec<&Specifier> = group.iter().flat_map(|r| &r.specifiers).collect();
        if !specifiers_satisfiable(&specs) {
            return Err(EnvError::Conflict { package: name, requirements: group.iter().map(|r| r.raw.clone()).collect() });
        }
        out.extend(group);
    }
    out.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| a.raw.cmp(&b.raw)));
    Ok(out)
}

/// Outcome of merging per-example dependency lists into one shared list.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct MergedRequirements {
    pub requirements: Vec<String>,
    /// Requirements that lost a conflict: (package, dropped, kept).
    pub overridden: Vec<(String, String, String)>,
}

/// Merges dependency lists in order. When a package's requirements cannot
/// be satisfied together, the requirement seen last wins, as it would when
/// installing the lists one after another into one environment.
pub fn merge_requirements<'a>(lists: impl IntoIterator<Item = &'a [String]>) -> Result<MergedRequirements, EnvError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_name: HashMap<String, Vec<Requirement>> = HashMap::new();
    let mut overridden = Vec::new();
    for list in lists {
        for line in list {
            if line.trim().is_empty() {
                continue;
            }
            let req = Requirement::parse(line)?;
            let group = by_name.entry(req.name.clone()).or_insert_with(|| {
                order.push(req.name.clone());
                Vec::new()
            });
            if group.iter().any(|r| r.raw == req.raw) {
                continue;
            }
            let mut specs: Vec<&Specifier> = group.iter().flat_map(|r| &r.specifiers).collect();
            specs.extend(&req.specifiers);
            if specifiers_satisfiable(&specs) {
                group.push(req);
            } else {
                for lost in group.drain(..) {
                    overridden.push((req.name.clone(), lost.raw, req.raw.clone()));
                }
                group.push(req);
            }
        }
    }
    let mut requirements: Vec<String> =
        order.iter().flat_map(|n| by_name[n].iter().map(|r| r.raw.clone())).collect();
    requirements.sort();
    Ok(MergedRequirements { requirements, overridden })
}

/// Installs packages into a target directory.
pub trait PackageInstaller: Send + Sync {
    fn install(&self, requirements: &[Requirement], site_dir: &Path) -> Result<(), EnvError>;
}

/// Installs with `python -m pip install --target`.
#[derive(Debug, Clone)]
pub struct PipInstaller {
    pub python: PathBuf,
    pub index_url: Option<String>,
}

impl PackageInstaller for PipInstaller {
    fn install(&self, requirements: &[Requirement], site_dir: &Path) -> Result<(), EnvError> {
        let req_file = site_dir.with_extension("requirements.txt");
        let body: String = requirements.iter().map(|r| format!("{}\n", r.raw)).collect();
        fs::write(&req_file, body)?;
        let mut cmd = Command::new(&self.python);
        cmd.args(["-m", "pip", "install", "--no-input", "--disable-pip-version-check", "--target"])
            .arg(site_dir)
            .arg("-r")
            .arg(&req_file);
        if let Some(url) = &self.index_url {
            cmd.args(["--index-url", url]);
        }
        let out = cmd.output()?;
        if !out.status.success() {
            let mut trace = String::from_utf8_lossy(&out.stderr).into_owned();
            trace.push_str(&String::from_utf8_lossy(&out.stdout));
            return Err(EnvError::Install { trace });
        }
        Ok(())
    }
}

/// Offline installer that writes a placeholder package per requirement.
/// Each package exposes `__version__`, the pinned (`==`) or lower-bound
/// version, or `"0"`. Used for fixtures and dry runs.
#[derive(Debug, Clone, Default)]
pub struct StubInstaller;

impl PackageInstaller for StubInstaller {
    fn install(&self, requirements: &[Requirement], site_dir: &Path) -> Result<(), EnvError> {
        for req in requirements {
            let version = req
                .specifiers
                .iter()
                .find(|s| s.op == Operator::Eq)
                .or_else(|| req.specifiers.iter().find(|s| matches!(s.op, Operator::Ge | Operator::Compatible)))
                .map_or_else(|| "0".to_string(), |s| s.version.to_string());
            let pkg = site_dir.join(req.name.replace('-', "_"));
            fs::create_dir_all(&pkg)?;
            fs::write(pkg.join("__init__.py"), format!("__version__ = {version:?}\n"))?;
        }
        Ok(())
    }
}

/// A built environment. Read-only after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Environment {
    /// Hex SHA-256 of the normalized requirement list.
    pub key: String,
    pub python: PathBuf,
    /// Directory added to `PYTHONPATH`; `None` for the bare interpreter.
    pub site_dir: Option<PathBuf>,
    pub requirements: Vec<String>,
}

/// Builds and caches environments under a root directory.
pub struct EnvironmentManager {
    root: PathBuf,
    python: PathBuf,
    installer: Arc<dyn PackageInstaller>,
    builds: Mutex<HashMap<String, Arc<Mutex<Option<Environment>>>>>,
}

impl fmt::Debug for EnvironmentManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnvironmentManager").field("root", &self.root).field("python", &self.python).finish()
    }
}

const COMPLETE_MARKER: &str = ".complete";

impl EnvironmentManager {
    pub fn new(root: impl Into<PathBuf>, python: impl Into<PathBuf>, installer: Arc<dyn PackageInstaller>) -> Self {
        EnvironmentManager { root: root.into(), python: python.into(), installer, builds: Mutex::new(HashMap::new()) }
    }

    pub fn python(&self) -> &Path {
        &self.python
    }

    /// Returns the environment for `dependencies`, building it on first use.
    /// Concurrent requests for the same list wait for a single build.
    pub fn build(&self, dependencies: &[String]) -> Result<Environment, EnvError> {
        let reqs = normalize_requirements(dependencies)?;
        let canonical: Vec<String> = reqs.iter().map(|r| r.raw.clone()).collect();
        let key = hex::encode(Sha256::digest(canonical.join("\n").as_bytes()));
        if reqs.is_empty() {
            return Ok(Environment { key, python: self.python.clone(), site_dir: None, requirements: canonical });
        }

        let slot = self.builds.lock().entry(key.clone()).or_default().clone();
        let mut guard = slot.lock();
        if let Some(env) = guard.as_ref() {
            return Ok(env.clone());
        }
        let site_dir = self.root.join(&key).join("site");
        if !self.root.join(&key).join(COMPLETE_MARKER).exists() {
            if site_dir.exists() {
                fs::remove_dir_all(&site_dir)?;
            }
            fs::create_dir_all(&site_dir)?;
            log::info!("building environment {} for {} requirement(s)", &key[..12], reqs.len());
            self.installer.install(&reqs, &site_dir)?;
            fs::write(self.root.join(&key).join(COMPLETE_MARKER), canonical.join("\n"))?;
        }
        let env = Environment { key, python: self.python.clone(), site_dir: Some(site_dir), requirements: canonical };
        *guard = Some(env.clone());
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

    fn strs(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_requirements() {
        let r = Requirement::parse("Scikit_Learn[extra] >=1.0, <2 ; python_version>'3'").unwrap();
        assert_eq!(r.name, "scikit-learn");
        assert_eq!(r.specifiers.len(), 2);
        assert!(Requirement::parse(">=1.0").is_err());
        assert!(Requirement::parse("pkg ~ 1").is_err());
    }

    #[test]
    fn versions_compare_on_release() {
        assert!(Version::parse("1.10").unwrap() > Version::parse("1.9").unwrap());
        assert_eq!(Version::parse("1.0").unwrap(), Version::parse("1").unwrap());
        assert_eq!(Version::parse("2.0rc1").unwrap(), Version(vec![2, 0]));
    }

    #[test]
    fn conflicting_pins_are_fatal() {
        let err = normalize_requirements(&strs(&["pkg==1.0", "pkg==2.0"])).unwrap_err();
        assert!(matches!(err, EnvError::Conflict { ref package, .. } if package == "pkg"));
        assert!(normalize_requirements(&strs(&["pkg>=2", "pkg<2"])).is_err());
        assert!(normalize_requirements(&strs(&["pkg~=1.4", "pkg==1.5.2"])).is_ok());
        assert!(normalize_requirements(&strs(&["pkg~=1.4", "pkg==2.0"])).is_err());
        assert!(normalize_requirements(&strs(&["pkg>=1,<=1", "pkg!=1"])).is_err());
        assert!(normalize_requirements(&strs(&["pkg>=1", "pkg<3", "other"])).is_ok());
    }

    #[test]
    fn merge_keeps_last_conflicting_pin() {
        let a = strs(&["fakepkg==1.0", "numpy"]);
        let b = strs(&["fakepkg==2.0", "numpy"]);
        let merged = merge_requirements([a.as_slice(), b.as_slice()]).unwrap();
        assert_eq!(merged.requirements, ["fakepkg==2.0", "numpy"]);
        assert_eq!(merged.overridden, [("fakepkg".to_string(), "fakepkg==1.0".to_string(), "fakepkg==2.0".to_string())]);
    }

    struct Counting(AtomicUsize);

    impl PackageInstaller for Counting {
        fn install(&self, requirements: &[Requirement], site_dir: &Path) -> Result<(), EnvError> {
            self.0.fetch_add(1, AtomicOrdering::SeqCst);
            StubInstaller.install(requirements, site_dir)
        }
    }

    #[test]
    fn identical_lists_build_once() {
        let dir = tempfile::tempdir().unwrap();
        let installer = Arc::new(Counting(AtomicUsize::new(0)));
        let mgr = EnvironmentManager::new(dir.path(), "python3", installer.clone());
        let e1 = mgr.build(&strs(&["numpy", "numpy"])).unwrap();
        let e2 = mgr.build(&strs(&["numpy"])).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.requirements, ["numpy"]);
        assert_eq!(installer.0.load(AtomicOrdering::SeqCst), 1);
        assert!(e1.site_dir.unwrap().join("numpy/__init__.py").exists());
    }

    #[test]
    fn empty_list_is_bare_interpreter() {
        let dir = tempfile::tempdir().unwrap();
        let mgr = EnvironmentManager::new(dir.path(), "python3", Arc::new(StubInstaller));
        let env = mgr.build(&[]).unwrap();
        assert!(env.site_dir.is_none());
        assert_eq!(env.python, PathBuf::from("python3"));
    }
}
