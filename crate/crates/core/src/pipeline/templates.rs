use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::llm::Message;

/// Line separating the system part of a template file from the user part.
pub const USER_SEPARATOR: &str = "%%USER%%";

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{0}` lacks the {USER_SEPARATOR} separator line")]
    MissingSeparator(String),
    #[error("template `{template}` uses unknown placeholder `{name}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` has an unclosed placeholder")]
    Unclosed { template: String },
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A prompt template: system text and user text with `{{name}}`
/// placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        let mut system = String::new();
        let mut user = None::<String>;
        for line in text.split_inclusive('\n') {
            match &mut user {
                None if line.trim_end() == USER_SEPARATOR => user = Some(String::new()),
                None => system.push_str(line),
                Some(u) => u.push_str(line),
            }
        }
        let user = user.ok_or_else(|| TemplateError::MissingSeparator(name.to_string()))?;
        Ok(Template { name: name.to_string(), system: system.trim_end().to_string(), user: user.trim_end().to_string() })
    }

    /// Substitutes placeholders in one pass; substituted values are never
    /// rescanned.
    pub fn render(&self, vars: &BTreeMap<&str, &str>) -> Result<Vec<Message>, TemplateError> {
        Ok(vec![Message::system(self.fill(&self.system, vars)?), Message::user(self.fill(&self.user, vars)?)])
    }

    fn fill(&self, text: &str, vars: &BTreeMap<&str, &str>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| TemplateError::Unclosed { template: self.name.clone() })?;
            let key = after[..close].trim();
            let value = vars.get(key).ok_or_else(|| TemplateError::UnknownPlaceholder {
                template: self.name.clone(),
                name: key.to_string(),
            })?;
            out.push_str(value);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// One template per LLM-driven stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub sandbox: Template,
    pub tests: Template,
    pub debug: Template,
    pub instruction: Template,
    pub augment: Template,
}

const BUNDLED: [(&str, &str); 5] = [
    ("sandbox", include_str!("../../templates/sandbox.txt")),
    ("tests", include_str!("../../templates/tests.txt")),
    ("debug", include_str!("../../templates/debug.txt")),
    ("instruction", include_str!("../../templates/instruction.txt")),
    ("augment", include_str!("../../templates/augment.txt")),
];

impl Templates {
    pub fn bundled() -> Self {
        Self::from_texts(|name| Ok(bundled_text(name).to_string())).expect("bundled templates are well-formed")
    }

    /// Loads `<dir>/<stage>.txt`, falling back to the bundled text for any
    /// file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Self::from_texts(|name| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                fs::read_to_string(&path).map_err(|source| TemplateError::Io { path: path.display().to_string(), source })
            } else {
                Ok(bundled_text(name).to_string())
            }
        })
    }

    fn from_texts(mut get: impl FnMut(&str) -> Result<String, TemplateError>) -> Result<Self, TemplateError> {
        let mut load = |name: &str| -> Result<Template, TemplateError> { Template::parse(name, &get(name)?) };
        Ok(Templates {
            sandbox: load("sandbox")?,
            tests: load("tests")?,
            debug: load("debug")?,
            instruction: load("instruction")?,
            augment: load("augment")?,
        })
    }
}

fn bundled_text(name: &str) -> &'static str {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).expect("known template name")
}
