use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::python::syntax::{self, FunctionSite, SiteError};

/// Marker comment opening the target slot in a serialized context.
pub const SLOT_BEGIN: &str = "# [target-begin]";
/// Marker comment closing the target slot.
pub const SLOT_END: &str = "# [target-end]";

/// Minimum number of assert statements in a test set.
pub const MIN_ASSERTS: usize = 3;

/// Functionality / inputs / outputs description of the target.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub functionality: String,
    pub inputs: String,
    pub outputs: String,
}

impl Instruction {
    pub fn is_complete(&self) -> bool {
        [&self.functionality, &self.inputs, &self.outputs].iter().all(|f| !f.trim().is_empty())
    }

    /// Docstring block placed under the function header, every line
    /// prefixed with `indent`.
    pub fn render_docstring(&self, indent: &str) -> String {
        let mut out = format!("{indent}\"\"\"\n");
        for (label, value) in [("Functionality", &self.functionality), ("Inputs", &self.inputs), ("Outputs", &self.outputs)] {
            let mut lines = value.trim().lines();
            out.push_str(&format!("{indent}{label}: {}\n", lines.next().unwrap_or("").trim()));
            for cont in lines {
                out.push_str(&format!("{indent}    {}\n", cont.trim()));
            }
        }
        out.push_str(&format!("{indent}\"\"\"\n"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestOrigin {
    Generated,
    Augmented { model_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSet {
    pub name: String,
    pub code: String,
    pub origin: TestOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TestCheckError {
    #[error("test code does not parse (line {0})")]
    Syntax(usize),
    #[error("only {0} assert statements")]
    TooFewAsserts(usize),
    #[error("target function is never called")]
    TargetNotCalled,
}

impl TestCheckError {
    /// Short reason code used in stage histories and funnel reports.
    pub fn reason(&self) -> &'static str {
        match self {
            TestCheckError::Syntax(_) => "tests_parse_error",
            TestCheckError::TooFewAsserts(_) => "too_few_asserts",
            TestCheckError::TargetNotCalled => "target_not_called",
        }
    }
}

/// Static checks every test set must satisfy: it parses, holds at least
/// [`MIN_ASSERTS`] asserts and calls `function_name` somewhere.
pub fn check_test_code(code: &str, function_name: &str) -> Result<(), TestCheckError> {
    let tree = syntax::parse_checked(code).map_err(|e| TestCheckError::Syntax(e.line))?;
    let asserts = syntax::count_asserts(&tree);
    if asserts < MIN_ASSERTS {
        return Err(TestCheckError::TooFewAsserts(asserts));
    }
    if !syntax::calls_function(code, &tree, function_name) {
        return Err(TestCheckError::TargetNotCalled);
    }
    Ok(())
}

impl TestSet {
    pub fn check(&self, function_name: &str) -> Result<(), TestCheckError> {
        check_test_code(&self.code, function_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub verdict: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub history: Vec<StageRecord>,
}

/// Metadata keys written by the pipeline.
pub mod meta {
    pub const FUNCTION_NAME: &str = "function_name";
    pub const QUALIFIED_NAME: &str = "qualified_name";
    pub const ORIGINAL_DOCSTRING: &str = "original_docstring";
    pub const INSTRUCTION_DEGRADED: &str = "instruction_degraded";
    pub const DEBUG_ITERATIONS: &str = "debug_iterations";
}

/// A self-contained benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub id: String,
    /// Program text with the target body replaced by a marker pair.
    pub context: String,
    /// Ground-truth body, indented as it sits in the program.
    pub target: String,
    pub function_header: String,
    pub instruction: Instruction,
    pub test_sets: Vec<TestSet>,
    pub dependencies: Vec<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExampleError {
    #[error("context has no well-formed target slot")]
    MissingSlot,
    #[error("example has no test sets")]
    NoTestSets,
    #[error("first test set is not the generated one")]
    FirstSetNotGenerated,
    #[error("instruction is incomplete")]
    IncompleteInstruction,
    #[error("test set `{name}`: {error}")]
    BadTestSet { name: String, error: TestCheckError },
    #[error("metadata lacks `{0}`")]
    MissingMetadata(&'static str),
}

/// Byte range of the marker pair, whole lines inclusive, plus the marker
/// indentation.
pub fn slot_range(context: &str) -> Option<(Range<usize>, String)> {
    let mut offset = 0;
    let mut begin: Option<(usize, String)> = None;
    for line in context.split_inclusive('\n') {
        let trimmed = line.trim();
        match &begin {
            None if trimmed == SLOT_BEGIN => {
                let indent = line[..line.len() - line.trim_start().len()].to_string();
                begin = Some((offset, indent));
            }
            Some((start, indent)) if trimmed == SLOT_END => {
                return Some((*start..offset + line.len(), indent.clone()));
            }
            Some(_) if trimmed == SLOT_BEGIN => return None,
            _ => {}
        }
        offset += line.len();
    }
    None
}

impl EvalExample {
    /// Replaces the marker lines with `fill`. A missing trailing newline is
    /// added so following code stays on its own line.
    pub fn fill_slot(&self, fill: &str) -> String {
        let Some((range, _)) = slot_range(&self.context) else {
            return self.context.clone();
        };
        let mut out = String::with_capacity(self.context.len() + fill.len());
        out.push_str(&self.context[..range.start]);
        out.push_str(fill);
        if !fill.is_empty() && !fill.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(&self.context[range.end..]);
        out
    }

    /// The ground-truth program.
    pub fn assemble(&self) -> String {
        self.fill_slot(&self.target)
    }

    /// Indentation of the slot (the target body).
    pub fn slot_indent(&self) -> String {
        slot_range(&self.context).map(|(_, i)| i).unwrap_or_default()
    }

    pub fn function_name(&self) -> &str {
        self.metadata.get(meta::FUNCTION_NAME).map(String::as_str).unwrap_or_default()
    }

    pub fn qualified_name(&self) -> &str {
        self.metadata
            .get(meta::QUALIFIED_NAME)
            .map(String::as_str)
            .unwrap_or_else(|| self.function_name())
    }

    pub fn instruction_degraded(&self) -> bool {
        self.metadata.get(meta::INSTRUCTION_DEGRADED).is_some_and(|v| v == "true")
    }

    pub fn test_codes(&self) -> Vec<&str> {
        self.test_sets.iter().map(|t| t.code.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), ExampleError> {
        if slot_range(&self.context).is_none() {
            return Err(ExampleError::MissingSlot);
        }
        if self.function_name().is_empty() {
            return Err(ExampleError::MissingMetadata(meta::FUNCTION_NAME));
        }
        let first = self.test_sets.first().ok_or(ExampleError::NoTestSets)?;
        if first.origin != TestOrigin::Generated {
            return Err(ExampleError::FirstSetNotGenerated);
        }
        if !self.instruction.is_complete() {
            return Err(ExampleError::IncompleteInstruction);
        }
        for t in &self.test_sets {
            t.check(self.function_name())
                .map_err(|error| ExampleError::BadTestSet { name: t.name.clone(), error })?;
        }
        Ok(())
    }
}

/// A sandboxed program split into context and target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSplit {
    pub context: String,
    pub target: String,
    pub function_header: String,
    /// Raw docstring literal, as written in the source.
    pub docstring: Option<String>,
    pub qualified_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SlotError {
    #[error("code does not parse (line {0})")]
    Syntax(usize),
    #[error(transparent)]
    Site(#[from] SiteError),
    #[error("target function has an empty body")]
    EmptyTarget,
    #[error("code already contains a slot marker")]
    MarkerInSource,
}

impl SlotError {
    pub fn reason(&self) -> &'static str {
        match self {
            SlotError::Syntax(_) => "parse_error",
            SlotError::Site(SiteError::NotFound(_)) => "target_absent",
            SlotError::Site(SiteError::InlineBody(_)) => "target_inline",
            SlotError::EmptyTarget => "empty_target",
            SlotError::MarkerInSource => "marker_in_source",
        }
    }
}

/// Cuts the body of `function_name` out of `code`. The docstring is kept out
/// of both halves: the instruction replaces it in prompts.
pub fn split_slot(code: &str, function_name: &str) -> Result<SlotSplit, SlotError> {
    if code.contains(SLOT_BEGIN) || code.contains(SLOT_END) {
        return Err(SlotError::MarkerInSource);
    }
    let tree = syntax::parse_checked(code).map_err(|e| SlotError::Syntax(e.line))?;
    let site = syntax::find_function(code, &tree, function_name)?;
    let start = target_start(code, &site);
    let target = &code[start..site.body.end];
    if target.trim().is_empty() {
        return Err(SlotError::EmptyTarget);
    }
    let mut target = target.to_string();
    if !target.ends_with('\n') {
        target.push('\n');
    }
    let indent = &site.body_indent;
    let mut context = String::with_capacity(code.len());
    context.push_str(&code[..site.header_end]);
    if !context.ends_with('\n') {
        context.push('\n');
    }
    context.push_str(&format!("{indent}{SLOT_BEGIN}\n{indent}{SLOT_END}\n"));
    context.push_str(&code[site.body.end..]);
    Ok(SlotSplit {
        context,
        target,
        function_header: code[site.header_start..site.header_end].to_string(),
        docstring: site.docstring.clone().map(|d| code[d].to_string()),
        qualified_name: site.qualified_name(),
    })
}

/// Start of the target: the first non-blank line after the docstring (or
/// header).
pub(crate) fn target_start(code: &str, site: &FunctionSite) -> usize {
    let mut at = match &site.docstring {
        Some(d) => code[d.end..].find('\n').map_or(code.len(), |i| d.end + i + 1),
        None => site.header_end,
    };
    while at < site.body.end {
        let line_end = code[at..].find('\n').map_or(code.len(), |i| at + i + 1);
        if !code[at..line_end].trim().is_empty() {
            break;
        }
        at = line_end;
    }
    at.min(site.body.end.max(site.body.start))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CODE: &str = "import re\n\nclass K:\n    def f(self, x):\n        \"\"\"Doc.\"\"\"\n\n        y = x + 1\n        return y\n\n    def g(self):\n        return 2\n";

    fn example(split: &SlotSplit) -> EvalExample {
        let mut metadata = BTreeMap::new();
        metadata.insert(meta::FUNCTION_NAME.to_string(), "f".to_string());
        EvalExample {
            id: "e".into(),
            context: split.context.clone(),
            target: split.target.clone(),
            function_header: split.function_header.clone(),
            instruction: Instruction { functionality: "a".into(), inputs: "b".into(), outputs: "c".into() },
            test_sets: vec![TestSet {
                name: "generated".into(),
                code: "k = K()\nassert k.f(1) == 2\nassert k.f(2) == 3\nassert k.f(0) == 1\n".into(),
                origin: TestOrigin::Generated,
            }],
            dependencies: vec![],
            provenance: Provenance::default(),
            metadata,
        }
    }

    #[test]
    fn split_and_reassemble() {
        let s = split_slot(CODE, "f").unwrap();
        assert_eq!(s.target, "        y = x + 1\n        return y\n");
        assert_eq!(s.function_header, "    def f(self, x):\n");
        assert_eq!(s.docstring.as_deref(), Some("\"\"\"Doc.\"\"\""));
        assert_eq!(s.qualified_name, "K.f");
        assert_eq!(
            s.context,
            "import re\n\nclass K:\n    def f(self, x):\n        # [target-begin]\n        # [target-end]\n\n    def g(self):\n        return 2\n"
        );
        let e = example(&s);
        assert_eq!(e.assemble(), CODE.replace("        \"\"\"Doc.\"\"\"\n\n", ""));
        assert_eq!(e.slot_indent(), "        ");
        e.validate().unwrap();
    }

    #[test]
    fn fill_slot_adds_newline() {
        let e = example(&split_slot(CODE, "f").unwrap());
        assert!(e.fill_slot("        return 0").contains("        return 0\n\n    def g"));
    }

    #[test]
    fn split_errors() {
        assert_eq!(split_slot(CODE, "h").unwrap_err().reason(), "target_absent");
        assert_eq!(split_slot("def f(:\n", "f").unwrap_err().reason(), "parse_error");
        assert_eq!(split_slot("def f():\n    \"\"\"only doc\"\"\"\n", "f").unwrap_err().reason(), "empty_target");
        assert_eq!(split_slot("def f(): return 1\n", "f").unwrap_err().reason(), "target_inline");
    }

    #[test]
    fn test_check_reasons() {
        assert_eq!(check_test_code("assert f(1)\nassert f(2)\n", "f"), Err(TestCheckError::TooFewAsserts(2)));
        assert_eq!(check_test_code("assert g(1)\nassert g(2)\nassert g(3)\n", "f"), Err(TestCheckError::TargetNotCalled));
        assert_eq!(check_test_code("assert f(1)\nassert f(2)\nassert f(3)\n", "f"), Ok(()));
    }

    #[test]
    fn instruction_docstring_layout() {
        let i = Instruction {
            functionality: "Adds one.".into(),
            inputs: "x: an int.".into(),
            outputs: "The successor.".into(),
        };
        assert_eq!(
            i.render_docstring("    "),
            "    \"\"\"\n    Functionality: Adds one.\n    Inputs: x: an int.\n    Outputs: The successor.\n    \"\"\"\n"
        );
    }
}
