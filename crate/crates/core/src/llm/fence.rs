/// A fenced block found in model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    /// Info string after the opening fence (`python`, `requirements`, ...),
    /// empty when absent.
    pub lang: String,
    pub content: String,
}

/// All triple-backtick fenced blocks, in order. An unterminated final block
/// runs to the end of the text.
pub fn extract_code_blocks(text: &str) -> Vec<CodeBlock> {
    let mut blocks = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match &mut current {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    current = Some((info.trim().to_string(), Vec::new()));
                }
            }
            Some((lang, lines)) => {
                // Any fence line closes; nested fences are not supported.
                if trimmed.starts_with("```") {
                    blocks.push(CodeBlock { lang: std::mem::take(lang), content: lines.join("\n") });
                    current = None;
                } else {
                    lines.push(line);
                }
            }
        }
    }
    if let Some((lang, lines)) = current {
        blocks.push(CodeBlock { lang, content: lines.join("\n") });
    }
    blocks
}

/// Content of the first fenced block, or the text unchanged when it has no
/// fence.
pub fn extract_code_block(text: &str) -> String {
    match extract_code_blocks(text).into_iter().next() {
        Some(b) => b.content,
        None => text.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fenced_python() {
        assert_eq!(extract_code_block("```python\nx=1\n```"), "x=1");
    }

    #[test]
    fn no_fence_falls_back() {
        assert_eq!(extract_code_block("x=1"), "x=1");
    }

    #[test]
    fn first_of_two_blocks() {
        let text = "Here:\n```python\ndef f():\n    return 1\n```\nand tests\n```python\nassert f() == 1\n```\n";
        assert_eq!(extract_code_block(text), "def f():\n    return 1");
        let blocks = extract_code_blocks(text);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[1].content, "assert f() == 1");
        assert_eq!(blocks[0].lang, "python");
    }

    #[test]
    fn unterminated_block_runs_to_end() {
        assert_eq!(extract_code_block("```\nx = 1\ny = 2"), "x = 1\ny = 2");
    }

    proptest! {
        #[test]
        fn idempotent(s in "(```(python)?\n)?[a-z =1\n]{0,40}(\n```)?[a-z \n]{0,10}") {
            let once = extract_code_block(&s);
            prop_assert_eq!(extract_code_block(&once), once);
        }
    }
}
