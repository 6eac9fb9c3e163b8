//! Checks that prompts never carry test code.

use std::collections::HashSet;

/// Length of the windows compared between prompts and test code.
pub const WINDOW: usize = 20;

/// Replacement for redacted spans.
pub const WITHHELD: &str = "[test code withheld]";

/// Every `WINDOW`-char substring of the secrets that is not all whitespace.
fn windows(secrets: &[&str]) -> HashSet<String> {
    let mut set = HashSet::new();
    for s in secrets {
        let chars: Vec<char> = s.chars().collect();
        for w in chars.windows(WINDOW) {
            if w.iter().any(|c| !c.is_whitespace()) {
                set.insert(w.iter().collect());
            }
        }
    }
    set
}

/// Start offsets (in chars) of windows of `text` that occur in a secret.
fn hit_starts(text: &str, set: &HashSet<String>) -> Vec<usize> {
    let chars: Vec<char> = text.chars().collect();
    chars
        .windows(WINDOW)
        .enumerate()
        .filter(|(_, w)| set.contains(&w.iter().collect::<String>()))
        .map(|(i, _)| i)
        .collect()
}

/// A window of a prompt found in test code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    /// Char offset in the prompt.
    pub offset: usize,
    pub text: String,
}

/// Windows of `prompt` that also occur in any of `tests`.
pub fn scan(prompt: &str, tests: &[&str]) -> Vec<Leak> {
    let set = windows(tests);
    let chars: Vec<char> = prompt.chars().collect();
    hit_starts(prompt, &set)
        .into_iter()
        .map(|i| Leak { offset: i, text: chars[i..i + WINDOW].iter().collect() })
        .collect()
}

/// Replaces every span of `text` covered by a window shared with `secrets`
/// with [`WITHHELD`].
pub fn redact(text: &str, secrets: &[&str]) -> String {
    let set = windows(secrets);
    let chars: Vec<char> = text.chars().collect();
    let mut covered = vec![false; chars.len()];
    for i in hit_starts(text, &set) {
        covered[i..i + WINDOW].iter_mut().for_each(|c| *c = true);
    }
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        if covered[i] {
            out.push_str(WITHHELD);
            while i < chars.len() && covered[i] {
                i += 1;
            }
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn finds_and_redacts() {
        let tests = ["assert parse_version('1.2') == (1, 2)\n"];
        let stderr = "Traceback:\n  File \"tests\", line 1\n    assert parse_version('1.2') == (1, 2)\nAssertionError\n";
        assert!(!scan(stderr, &tests).is_empty());
        let red = redact(stderr, &tests);
        assert!(scan(&red, &tests).is_empty());
        assert!(red.contains("    [test code withheld]AssertionError"));
        assert!(scan("assert x == 1", &tests).is_empty());
    }

    #[test]
    fn whitespace_runs_are_ignored() {
        let pad = " ".repeat(40);
        assert!(scan(&pad, &[&pad]).is_empty());
    }

    proptest! {
        #[test]
        fn redaction_leaves_no_leak(secret in "[a-z()= ]{20,60}", before in "[A-Z ]{0,20}", after in "[A-Z ]{0,20}") {
            let text = format!("{before}{secret}{after}");
            let red = redact(&text, &[&secret]);
            prop_assert!(scan(&red, &[&secret]).is_empty());
        }
    }
}
