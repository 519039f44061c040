//! Architecture boundary guard.
//!
//! Finds every `import` / `from ... import` statement in Python source,
//! including ones nested in functions, classes and conditional blocks, and
//! rejects artifacts that reach into denied modules. The scanner understands
//! enough of Python's lexical structure (strings, comments, bracket and
//! backslash continuations, `;`-separated statements, one-line compound
//! statements) to avoid false hits inside literals.

use std::collections::BTreeSet;

use super::{Dependencies, Guard, GuardError, Verdict};
use crate::state::Context;

pub const DEFAULT_DENIED_MODULES: [&str; 4] = ["boto3", "sqlalchemy", "requests", "django"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportStatement {
    pub line: usize,
    /// Absolute module names referenced; empty for purely relative imports.
    pub modules: Vec<String>,
    pub relative: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanError {
    pub line: usize,
    pub message: String,
}

struct LogicalLine {
    line: usize,
    text: String,
}

const COMPOUND_KEYWORDS: [&str; 11] = [
    "if", "elif", "else", "try", "except", "finally", "with", "for", "while", "def", "class",
];

fn err(line: usize, message: &str) -> ScanError {
    ScanError {
        line,
        message: message.to_string(),
    }
}

/// Split source into logical lines with string literal contents and comments
/// blanked out.
fn logical_lines(src: &str) -> Result<Vec<LogicalLine>, ScanError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_start = 1;
    let mut line = 1;
    let mut depth: Vec<(char, usize)> = Vec::new();
    let mut i = 0;

    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '\'' | '"' => {
                let start_line = line;
                let triple = i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c;
                i += if triple { 3 } else { 1 };
                let mut closed = false;
                while i < chars.len() {
                    let d = chars[i];
                    if d == '\\' {
                        if i + 1 < chars.len() && chars[i + 1] == '\n' {
                            line += 1;
                        }
                        i += 2;
                        continue;
                    }
                    if d == '\n' {
                        if !triple {
                            return Err(err(start_line, "unterminated string literal"));
                        }
                        line += 1;
                    }
                    if d == c && (!triple || (i + 2 < chars.len() && chars[i + 1] == c && chars[i + 2] == c)) {
                        i += if triple { 3 } else { 1 };
                        closed = true;
                        break;
                    }
                    i += 1;
                }
                if !closed {
                    let msg = if triple {
                        "unterminated triple-quoted string literal"
                    } else {
                        "unterminated string literal"
                    };
                    return Err(err(start_line, msg));
                }
                cur.push_str("\"\"");
                continue;
            }
            '(' | '[' | '{' => {
                depth.push((c, line));
                cur.push(c);
            }
            ')' | ']' | '}' => {
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                match depth.pop() {
                    Some((open, _)) if open == want => cur.push(c),
                    _ => return Err(err(line, &format!("unmatched '{c}'"))),
                }
            }
            '\\' if i + 1 < chars.len() && chars[i + 1] == '\n' => {
                cur.push(' ');
                line += 1;
                i += 2;
                continue;
            }
            '\n' => {
                line += 1;
                if depth.is_empty() {
                    if !cur.trim().is_empty() {
                        out.push(LogicalLine {
                            line: cur_start,
                            text: std::mem::take(&mut cur),
                        });
                    }
                    cur.clear();
                    cur_start = line;
                } else {
                    cur.push(' ');
                }
            }
            _ => {
                if cur.trim().is_empty() && !c.is_whitespace() {
                    cur_start = line;
                }
                cur.push(c);
            }
        }
        i += 1;
    }
    if let Some((open, at)) = depth.pop() {
        return Err(err(at, &format!("'{open}' was never closed")));
    }
    if !cur.trim().is_empty() {
        out.push(LogicalLine {
            line: cur_start,
            text: cur,
        });
    }
    Ok(out)
}

/// Split on a character at bracket depth zero.
fn split_top_level(text: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            _ if c == sep && depth == 0 => {
                parts.push(&text[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

fn first_word(s: &str) -> &str {
    let end = s
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(s.len());
    &s[..end]
}

fn dotted_name(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join("")
}

fn parse_statement(stmt: &str, line: usize, out: &mut Vec<ImportStatement>) {
    let stmt = stmt.trim();
    if stmt.is_empty() {
        return;
    }
    let word = first_word(stmt);
    if word == "async" {
        parse_statement(&stmt[5..], line, out);
        return;
    }
    if COMPOUND_KEYWORDS.contains(&word) {
        // one-line compound statement: `if cond: import x`
        let parts = split_top_level(stmt, ':');
        if parts.len() > 1 {
            let body = stmt[parts[0].len() + 1..].trim();
            for s in split_top_level(body, ';') {
                parse_statement(s, line, out);
            }
        }
        return;
    }
    match word {
        "import" => {
            let rest = &stmt[6..];
            let modules = split_top_level(rest, ',')
                .into_iter()
                .filter_map(|item| {
                    let name = item.split(" as ").next().unwrap_or("").trim();
                    (!name.is_empty()).then(|| dotted_name(name))
                })
                .collect();
            out.push(ImportStatement {
                line,
                modules,
                relative: false,
            });
        }
        "from" => {
            let rest = stmt[4..].trim_start();
            let Some(import_at) = rest.find(" import") else {
                return;
            };
            let source = rest[..import_at].trim();
            let relative = source.starts_with('.');
            let module = dotted_name(source.trim_start_matches('.'));
            out.push(ImportStatement {
                line,
                modules: if relative || module.is_empty() {
                    Vec::new()
                } else {
                    vec![module]
                },
                relative,
            });
        }
        _ => {}
    }
}

/// All import statements in `src`, in source order.
pub fn scan_imports(src: &str) -> Result<Vec<ImportStatement>, ScanError> {
    let mut out = Vec::new();
    for logical in logical_lines(src)? {
        for stmt in split_top_level(&logical.text, ';') {
            parse_statement(stmt, logical.line, &mut out);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ImportBoundaryGuard {
    denied: BTreeSet<String>,
}

impl Default for ImportBoundaryGuard {
    fn default() -> Self {
        Self::new(DEFAULT_DENIED_MODULES.iter().map(|s| s.to_string()))
    }
}

impl ImportBoundaryGuard {
    pub fn new<I: IntoIterator<Item = String>>(denied: I) -> Self {
        Self {
            denied: denied.into_iter().collect(),
        }
    }

    /// `requests` denies `requests` and `requests.adapters`, not `requests_oauthlib`.
    fn is_denied(&self, module: &str) -> bool {
        self.denied
            .iter()
            .any(|d| module == d || (module.starts_with(d.as_str()) && module[d.len()..].starts_with('.')))
    }
}

impl Guard for ImportBoundaryGuard {
    fn type_name(&self) -> &str {
        "architecture"
    }

    fn evaluate(&self, artifact: &str, _ctx: &Context, _deps: &Dependencies) -> Result<Verdict, GuardError> {
        let imports = match scan_imports(artifact) {
            Ok(imports) => imports,
            Err(e) => return Ok(Verdict::fail(format!("Line {}: {}", e.line, e.message))),
        };
        for stmt in &imports {
            if let Some(m) = stmt.modules.iter().find(|m| self.is_denied(m)) {
                return Ok(Verdict::fail(format!("Domain imports infrastructure: {m}")));
            }
        }
        Ok(Verdict::pass())
    }
}
