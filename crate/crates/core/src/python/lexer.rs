//! Lexical scanner for Python source.
//!
//! Produces the same significant tokens as CPython's `tokenize` module
//! (NAME, NUMBER, STRING, OP), skipping comments, line breaks, indentation
//! bookkeeping and the encoding marker. Code-token counts and BLEU both use
//! this token stream.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Name,
    Number,
    String,
    Op,
    /// A character `tokenize` cannot classify (e.g. `$`, `?`).
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Range<usize>,
}

impl Token {
    pub fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.span.clone()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LexError {
    #[error("unterminated string literal starting at byte {0}")]
    UnterminatedString(usize),
}

// Longest operators first so greedy matching works.
const OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "!=", "==", "<=", ">=", "**", "//", "<<",
    ">>", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=", "+", "-", "*", "/", "%", "@",
    "&", "|", "^", "~", "<", ">", "(", ")", "[", "]", "{", "}", ",", ":", ".", ";", "=",
];

/// Tokenizes `src`, returning only significant tokens.
pub fn tokenize(src: &str) -> Result<Vec<Token>, LexError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = if src.starts_with('\u{feff}') { 3 } else { 0 };

    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\x0c' | b'\r' | b'\n' => i += 1,
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'\\' if matches!(bytes.get(i + 1), Some(b'\n')) => i += 2,
            b'\\' if bytes.get(i + 1) == Some(&b'\r') && bytes.get(i + 2) == Some(&b'\n') => i += 3,
            b'0'..=b'9' => {
                let end = scan_number(bytes, i);
                tokens.push(Token { kind: TokenKind::Number, span: i..end });
                i = end;
            }
            b'.' if bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                let end = scan_number(bytes, i);
                tokens.push(Token { kind: TokenKind::Number, span: i..end });
                i = end;
            }
            b'"' | b'\'' => {
                let end = scan_string(bytes, i, i)?;
                tokens.push(Token { kind: TokenKind::String, span: i..end });
                i = end;
            }
            _ if is_name_start(src, i) => {
                let end = scan_name(src, i);
                let word = &src[i..end];
                if end < bytes.len() && matches!(bytes[end], b'"' | b'\'') && is_string_prefix(word) {
                    let close = scan_string(bytes, i, end)?;
                    tokens.push(Token { kind: TokenKind::String, span: i..close });
                    i = close;
                } else {
                    tokens.push(Token { kind: TokenKind::Name, span: i..end });
                    i = end;
                }
            }
            _ => {
                if let Some(op) = OPERATORS.iter().find(|op| src[i..].starts_with(**op)) {
                    tokens.push(Token { kind: TokenKind::Op, span: i..i + op.len() });
                    i += op.len();
                } else {
                    let len = src[i..].chars().next().map_or(1, char::len_utf8);
                    tokens.push(Token { kind: TokenKind::Error, span: i..i + len });
                    i += len;
                }
            }
        }
    }
    Ok(tokens)
}

/// Token texts, convenient for n-gram metrics.
pub fn token_texts(src: &str) -> Result<Vec<String>, LexError> {
    Ok(tokenize(src)?.iter().map(|t| t.text(src).to_string()).collect())
}

fn is_name_start(src: &str, i: usize) -> bool {
    src[i..]
        .chars()
        .next()
        .is_some_and(|ch| ch == '_' || ch.is_alphabetic())
}

fn scan_name(src: &str, start: usize) -> usize {
    let mut end = start;
    for ch in src[start..].chars() {
        if ch == '_' || ch.is_alphanumeric() {
            end += ch.len_utf8();
        } else {
            break;
        }
    }
    end
}

fn is_string_prefix(word: &str) -> bool {
    matches!(
        word.to_ascii_lowercase().as_str(),
        "r" | "u" | "b" | "f" | "br" | "rb" | "fr" | "rf"
    )
}

fn scan_number(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    let is_digitish = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    if bytes[i] == b'0' && matches!(bytes.get(i + 1), Some(b'x' | b'X' | b'o' | b'O' | b'b' | b'B')) {
        i += 2;
        while i < bytes.len() && is_digitish(bytes[i]) {
            i += 1;
        }
        return i;
    }
    while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'_') {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'_') {
            i += 1;
        }
    }
    if i < bytes.len() && matches!(bytes[i], b'e' | b'E') {
        let mut j = i + 1;
        if j < bytes.len() && matches!(bytes[j], b'+' | b'-') {
            j += 1;
        }
        if j < bytes.len() && bytes[j].is_ascii_digit() {
            i = j;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'_') {
                i += 1;
            }
        }
    }
    if i < bytes.len() && matches!(bytes[i], b'j' | b'J') {
        i += 1;
    }
    i
}

/// `quote_at` points at the opening quote; `start` is the token start
/// (before any prefix) and is only used for error reporting.
fn scan_string(bytes: &[u8], start: usize, quote_at: usize) -> Result<usize, LexError> {
    let quote = bytes[quote_at];
    let triple = bytes.get(quote_at + 1) == Some(&quote) && bytes.get(quote_at + 2) == Some(&quote);
    let mut i = if triple { quote_at + 3 } else { quote_at + 1 };
    while i < bytes.len() {
        let b = bytes[i];
        // A backslash escapes the next character even in raw strings as far
        // as finding the closing quote is concerned.
        if b == b'\\' {
            i += 2;
            continue;
        }
        if triple {
            if b == quote && bytes.get(i + 1) == Some(&quote) && bytes.get(i + 2) == Some(&quote) {
                return Ok(i + 3);
            }
        } else if b == quote {
            return Ok(i + 1);
        } else if b == b'\n' {
            return Err(LexError::UnterminatedString(start));
        }
        i += 1;
    }
    Err(LexError::UnterminatedString(start))
}
