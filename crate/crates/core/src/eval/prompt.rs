use crate::pipeline::{meta, slot_range, EvalExample};

/// Body placeholder shown in the slot.
pub const ELLIPSIS: &str = "...";

/// The docstring shown to the generator: the structured instruction, or the
/// original docstring when the instruction is degraded.
pub fn prompt_docstring(example: &EvalExample) -> String {
    let indent = example.slot_indent();
    if example.instruction_degraded() {
        if let Some(doc) = example.metadata.get(meta::ORIGINAL_DOCSTRING).filter(|d| !d.trim().is_empty()) {
            let mut out = format!("{indent}{}", doc.trim_start());
            if !out.ends_with('\n') {
                out.push('\n');
            }
            return out;
        }
    }
    example.instruction.render_docstring(&indent)
}

/// The code shown in the prompt: context with the slot replaced by the
/// docstring and an elided body.
pub fn prompt_code(example: &EvalExample) -> String {
    let Some((range, indent)) = slot_range(&example.context) else {
        return example.context.clone();
    };
    let mut out = String::with_capacity(example.context.len() + 256);
    out.push_str(&example.context[..range.start]);
    out.push_str(&prompt_docstring(example));
    out.push('\n');
    out.push_str(&format!("{indent}{ELLIPSIS}\n"));
    out.push_str(&example.context[range.end..]);
    out
}

/// Zero-shot prompt for one example. Test sets are never included.
pub fn build_prompt(example: &EvalExample) -> String {
    format!(
        "Complete the {} function in the code below based on the docstring.\n\
         Output one complete piece of code. Your code should start with a ```python delimiter and end with a ``` delimiter.\n\
         \n\
         ```python\n{}```",
        example.qualified_name(),
        prompt_code(example)
    )
}

/// Prompt with the test sets appended, for ablations that disclose tests.
pub fn build_prompt_with_tests(example: &EvalExample) -> String {
    let mut out = build_prompt(example);
    out.push_str("\n\nThe code will be checked with these tests:\n");
    for t in &example.test_sets {
        out.push_str(&format!("\n```python\n{}", t.code));
        if !t.code.ends_with('\n') {
            out.push('\n');
        }
        out.push_str("```\n");
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::pipeline::{Instruction, Provenance, TestOrigin, TestSet};
    use std::collections::BTreeMap;

    pub(crate) fn ck_example() -> EvalExample {
        let context = "from __future__ import print_function\nimport os\nimport sys\n\nclass CkClass ( object ) :\n    flags_dict = dict ( )\n    fields = dict ( )\n    flags = 0\n\n    def flags2text ( self ) :\n        # [target-begin]\n        # [target-end]\n";
        let mut metadata = BTreeMap::new();
        metadata.insert(meta::FUNCTION_NAME.to_string(), "flags2text".to_string());
        metadata.insert(meta::QUALIFIED_NAME.to_string(), "CkClass.flags2text".to_string());
        EvalExample {
            id: "ck".into(),
            context: context.into(),
            target: "        r = []\n        for k, v in self.flags_dict.items():\n            if self.flags & v:\n                r.append(k)\n        return r\n".into(),
            function_header: "    def flags2text ( self ) :\n".into(),
            instruction: Instruction {
                functionality: "Converts the 'self.flags' field into a\nlist of strings representing set flag bits.".into(),
                inputs: "No external inputs; uses class instance's\n'self.flags' and 'self.flags_dict'.".into(),
                outputs: "List of strings corresponding to set flags.".into(),
            },
            test_sets: vec![TestSet {
                name: "generated".into(),
                code: "c = CkClass()\nc.flags_dict = {'a': 1, 'b': 2}\nc.flags = 3\nassert sorted(c.flags2text()) == ['a', 'b']\nc.flags = 0\nassert c.flags2text() == []\nc.flags = 2\nassert c.flags2text() == ['b']\n".into(),
                origin: TestOrigin::Generated,
            }],
            dependencies: vec![],
            provenance: Provenance::default(),
            metadata,
        }
    }

    #[test]
    fn reproduces_reference_layout() {
        let expected = "Complete the CkClass.flags2text function in the code below based on the docstring.
Output one complete piece of code. Your code should start with a ```python delimiter and end with a ``` delimiter.

```python
from __future__ import print_function
import os
import sys

class CkClass ( object ) :
    flags_dict = dict ( )
    fields = dict ( )
    flags = 0

    def flags2text ( self ) :
        \"\"\"
        Functionality: Converts the 'self.flags' field into a
            list of strings representing set flag bits.
        Inputs: No external inputs; uses class instance's
            'self.flags' and 'self.flags_dict'.
        Outputs: List of strings corresponding to set flags.
        \"\"\"

        ...
```";
        assert_eq!(build_prompt(&ck_example()), expected);
    }

    #[test]
    fn degraded_uses_original_docstring() {
        let mut ex = ck_example();
        ex.metadata.insert(meta::INSTRUCTION_DEGRADED.into(), "true".into());
        ex.metadata.insert(meta::ORIGINAL_DOCSTRING.into(), "\"\"\"Return the names of set flags.\"\"\"".into());
        let p = build_prompt(&ex);
        assert!(p.contains("    def flags2text ( self ) :\n        \"\"\"Return the names of set flags.\"\"\"\n\n        ...\n"));
        assert!(!p.contains("Functionality:"));
    }

    #[test]
    fn tests_are_excluded() {
        let ex = ck_example();
        let p = build_prompt(&ex);
        assert!(!p.contains("assert"));
        assert!(!p.contains(ex.target.trim()));
        assert!(build_prompt_with_tests(&ex).contains("assert c.flags2text() == []"));
    }
}
