//! Textual behavior-tree format: parser, canonical serializer, the
//! contextual validation that gates LLM output, and extraction of a tree
//! expression out of a free-form reply.
//!
//! Grammar (canonical form is lowercase, single spaces, no newlines):
//!
//! ```text
//! tree := node
//! node := "(" "seq" node* ")" | "(" "fb" node* ")" | "(" "par" INT node* ")"
//!       | "(" "act" IDENT [IDENT] ")" | "(" "cond" IDENT [IDENT] ")"
//! IDENT := [a-z][a-z0-9_]*      INT := [1-9][0-9]*
//! ```
//!
//! Parsing is whitespace-insensitive and identifiers are
//! case-insensitive (canonicalized to lowercase). Files holding trees
//! use extension `.bt`, UTF-8, one tree per file.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::bt::{BTNode, ParamDomain, SkillRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParseErrorCode {
    UnbalancedParen,
    UnknownKind,
    BadThreshold,
    BadToken,
    TrailingInput,
}

/// Parse failure at a (1-based) position inside the input text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code:?} at {line}:{col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub code: ParseErrorCode,
    pub message: String,
}

impl ParseError {
    fn new(pos: (u32, u32), code: ParseErrorCode, message: impl Into<String>) -> ParseError {
        ParseError { line: pos.0, col: pos.1, code, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Open,
    Close,
    Atom(String),
}

struct Lexed {
    toks: Vec<(Tok, u32, u32)>,
    end: (u32, u32),
}

fn lex(text: &str) -> Lexed {
    let mut toks = Vec::new();
    let mut line = 1u32;
    let mut col = 1u32;
    let mut atom: Option<(String, u32, u32)> = None;
    for ch in text.chars() {
        let is_break = ch == '(' || ch == ')' || ch.is_whitespace();
        if is_break {
            if let Some((s, l, c)) = atom.take() {
                toks.push((Tok::Atom(s), l, c));
            }
        }
        match ch {
            '(' => toks.push((Tok::Open, line, col)),
            ')' => toks.push((Tok::Close, line, col)),
            c if c.is_whitespace() => {}
            c => match atom.as_mut() {
                Some((s, _, _)) => s.push(c.to_ascii_lowercase()),
                None => atom = Some((c.to_ascii_lowercase().to_string(), line, col)),
            },
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    if let Some((s, l, c)) = atom.take() {
        toks.push((Tok::Atom(s), l, c));
    }
    Lexed { toks, end: (line, col.max(1)) }
}

struct Parser {
    toks: Vec<(Tok, u32, u32)>,
    end: (u32, u32),
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, u32, u32)> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<(Tok, u32, u32)> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> (u32, u32) {
        self.peek().map(|(_, l, c)| (*l, *c)).unwrap_or(self.end)
    }

    fn parse_node(&mut self) -> Result<BTNode, ParseError> {
        match self.next() {
            Some((Tok::Open, _, _)) => {}
            Some((Tok::Close, l, c)) => {
                return Err(ParseError::new((l, c), ParseErrorCode::UnbalancedParen, "unexpected `)`"))
            }
            Some((Tok::Atom(a), l, c)) => {
                return Err(ParseError::new((l, c), ParseErrorCode::BadToken, format!("expected `(`, found `{a}`")))
            }
            None => {
                return Err(ParseError::new(self.end, ParseErrorCode::BadToken, "expected `(`, found end of input"))
            }
        }
        let (head, head_pos) = match self.next() {
            Some((Tok::Atom(a), l, c)) => (a, (l, c)),
            Some((Tok::Close, l, c)) => {
                return Err(ParseError::new((l, c), ParseErrorCode::BadToken, "empty node"))
            }
            Some((Tok::Open, l, c)) => {
                return Err(ParseError::new((l, c), ParseErrorCode::BadToken, "expected node kind"))
            }
            None => {
                return Err(ParseError::new(self.end, ParseErrorCode::UnbalancedParen, "unclosed `(`"))
            }
        };
        match head.as_str() {
            "seq" => Ok(BTNode::Sequence(self.parse_children()?)),
            "fb" => Ok(BTNode::Fallback(self.parse_children()?)),
            "par" => {
                let threshold = self.parse_threshold()?;
                Ok(BTNode::Parallel { threshold, children: self.parse_children()? })
            }
            "act" => {
                let (skill, param) = self.parse_leaf_args("act")?;
                Ok(BTNode::Action { skill, param })
            }
            "cond" => {
                let (check, param) = self.parse_leaf_args("cond")?;
                Ok(BTNode::Condition { check, param })
            }
            other => Err(ParseError::new(
                head_pos,
                ParseErrorCode::UnknownKind,
                format!("unknown node kind `{other}`"),
            )),
        }
    }

    fn parse_children(&mut self) -> Result<Vec<BTNode>, ParseError> {
        let mut children = Vec::new();
        loop {
            match self.peek() {
                Some((Tok::Close, _, _)) => {
                    self.next();
                    return Ok(children);
                }
                Some(_) => children.push(self.parse_node()?),
                None => {
                    return Err(ParseError::new(self.end, ParseErrorCode::UnbalancedParen, "unclosed `(`"))
                }
            }
        }
    }

    fn parse_threshold(&mut self) -> Result<usize, ParseError> {
        match self.next() {
            Some((Tok::Atom(a), l, c)) => {
                let ok = !a.is_empty()
                    && a.bytes().all(|b| b.is_ascii_digit())
                    && !a.starts_with('0');
                if !ok {
                    return Err(ParseError::new(
                        (l, c),
                        ParseErrorCode::BadThreshold,
                        format!("`{a}` is not a positive integer"),
                    ));
                }
                a.parse::<usize>().map_err(|_| {
                    ParseError::new((l, c), ParseErrorCode::BadThreshold, format!("threshold `{a}` out of range"))
                })
            }
            Some((_, l, c)) => {
                Err(ParseError::new((l, c), ParseErrorCode::BadThreshold, "`par` requires a threshold"))
            }
            None => Err(ParseError::new(self.end, ParseErrorCode::UnbalancedParen, "unclosed `(`")),
        }
    }

    fn parse_leaf_args(&mut self, kind: &str) -> Result<(String, Option<String>), ParseError> {
        let name = match self.next() {
            Some((Tok::Atom(a), l, c)) => {
                check_ident(&a, (l, c))?;
                a
            }
            Some((_, l, c)) => {
                return Err(ParseError::new((l, c), ParseErrorCode::BadToken, format!("`{kind}` requires a name")))
            }
            None => {
                return Err(ParseError::new(self.end, ParseErrorCode::UnbalancedParen, "unclosed `(`"))
            }
        };
        let mut param = None;
        match self.next() {
            Some((Tok::Close, _, _)) => {}
            Some((Tok::Atom(a), l, c)) => {
                check_ident(&a, (l, c))?;
                param = Some(a);
                match self.next() {
                    Some((Tok::Close, _, _)) => {}
                    Some((_, l, c)) => {
                        return Err(ParseError::new((l, c), ParseErrorCode::BadToken, "too many leaf arguments"))
                    }
                    None => {
                        return Err(ParseError::new(self.end, ParseErrorCode::UnbalancedParen, "unclosed `(`"))
                    }
                }
            }
            Some((Tok::Open, l, c)) => {
                return Err(ParseError::new((l, c), ParseErrorCode::BadToken, "leaves take no children"))
            }
            None => {
                return Err(ParseError::new(self.end, ParseErrorCode::UnbalancedParen, "unclosed `(`"))
            }
        }
        Ok((name, param))
    }
}

fn check_ident(atom: &str, pos: (u32, u32)) -> Result<(), ParseError> {
    let mut bytes = atom.bytes();
    let ok = matches!(bytes.next(), Some(b) if b.is_ascii_lowercase())
        && bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(ParseError::new(pos, ParseErrorCode::BadToken, format!("`{atom}` is not an identifier")))
    }
}

/// Parses one tree. Fails with `TrailingInput` if non-whitespace follows
/// a complete tree.
pub fn parse(text: &str) -> Result<BTNode, ParseError> {
    let lexed = lex(text);
    let mut parser = Parser { toks: lexed.toks, end: lexed.end, pos: 0 };
    let node = parser.parse_node()?;
    if parser.peek().is_some() {
        let pos = parser.here();
        return Err(ParseError::new(pos, ParseErrorCode::TrailingInput, "input continues after tree"));
    }
    Ok(node)
}

/// Emits the canonical form: lowercase, single spaces, no newlines.
/// `parse(serialize(t))` is structurally equal to `t`.
pub fn serialize(tree: &BTNode) -> String {
    let mut out = String::new();
    write_node(tree, &mut out);
    out
}

fn write_node(tree: &BTNode, out: &mut String) {
    match tree {
        BTNode::Sequence(children) => write_control("seq", None, children, out),
        BTNode::Fallback(children) => write_control("fb", None, children, out),
        BTNode::Parallel { threshold, children } => write_control("par", Some(*threshold), children, out),
        BTNode::Action { skill, param } => write_leaf("act", skill, param.as_deref(), out),
        BTNode::Condition { check, param } => write_leaf("cond", check, param.as_deref(), out),
    }
}

fn write_control(kind: &str, threshold: Option<usize>, children: &[BTNode], out: &mut String) {
    out.push('(');
    out.push_str(kind);
    if let Some(z) = threshold {
        out.push(' ');
        out.push_str(&z.to_string());
    }
    for child in children {
        out.push(' ');
        write_node(child, out);
    }
    out.push(')');
}

fn write_leaf(kind: &str, name: &str, param: Option<&str>, out: &mut String) {
    out.push('(');
    out.push_str(kind);
    out.push(' ');
    out.push_str(name);
    if let Some(p) = param {
        out.push(' ');
        out.push_str(p);
    }
    out.push(')');
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationCode {
    UnknownSkill,
    UnknownCondition,
    BadParam,
    ThresholdOutOfRange,
    EmptyControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Error,
    Warning,
}

/// One contextual problem, located by the path of child indices from the
/// root (the root itself has the empty path).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: Vec<usize>,
    pub code: ViolationCode,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({:?}) at ", self.code, self.severity)?;
        if self.path.is_empty() {
            write!(f, "root")?;
        } else {
            write!(f, "root")?;
            for idx in &self.path {
                write!(f, ".{idx}")?;
            }
        }
        write!(f, ": {}", self.message)
    }
}

/// Result of contextual validation. A tree is contextually valid iff no
/// error-severity violations exist; warnings (empty control nodes) are
/// legal to tick but evolutionarily useless.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.error_count() == 0
    }

    pub fn error_count(&self) -> usize {
        self.violations.iter().filter(|v| v.severity == Severity::Error).count()
    }
}

/// Checks a tree against a registry: unknown skills/conditions,
/// parameters outside the registered domain, Parallel thresholds outside
/// `[1, child-count]`, and empty control nodes (warnings). Problems are
/// data, not errors.
pub fn validate(tree: &BTNode, registry: &SkillRegistry) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut path = Vec::new();
    validate_node(tree, registry, &mut path, &mut report);
    report
}

fn validate_node(tree: &BTNode, registry: &SkillRegistry, path: &mut Vec<usize>, report: &mut ValidationReport) {
    match tree {
        BTNode::Sequence(children) | BTNode::Fallback(children) => {
            if children.is_empty() {
                report.violations.push(Violation {
                    path: path.clone(),
                    code: ViolationCode::EmptyControl,
                    severity: Severity::Warning,
                    message: "control node has no children".to_string(),
                });
            }
        }
        BTNode::Parallel { threshold, children } => {
            if children.is_empty() {
                report.violations.push(Violation {
                    path: path.clone(),
                    code: ViolationCode::EmptyControl,
                    severity: Severity::Warning,
                    message: "control node has no children".to_string(),
                });
            }
            if *threshold < 1 || *threshold > children.len() {
                report.violations.push(Violation {
                    path: path.clone(),
                    code: ViolationCode::ThresholdOutOfRange,
                    severity: Severity::Error,
                    message: format!("threshold {} outside [1, {}]", threshold, children.len()),
                });
            }
        }
        BTNode::Action { skill, param } => match registry.action_domain(skill) {
            None => report.violations.push(Violation {
                path: path.clone(),
                code: ViolationCode::UnknownSkill,
                severity: Severity::Error,
                message: format!("unknown skill `{skill}`"),
            }),
            Some(domain) => check_param(skill, param.as_deref(), domain, path, report),
        },
        BTNode::Condition { check, param } => match registry.condition_domain(check) {
            None => report.violations.push(Violation {
                path: path.clone(),
                code: ViolationCode::UnknownCondition,
                severity: Severity::Error,
                message: format!("unknown condition `{check}`"),
            }),
            Some(domain) => check_param(check, param.as_deref(), domain, path, report),
        },
    }
    for (idx, child) in tree.children().iter().enumerate() {
        path.push(idx);
        validate_node(child, registry, path, report);
        path.pop();
    }
}

fn check_param(
    name: &str,
    param: Option<&str>,
    domain: &ParamDomain,
    path: &mut Vec<usize>,
    report: &mut ValidationReport,
) {
    let message = match (domain, param) {
        (ParamDomain::None, None) => return,
        (ParamDomain::None, Some(p)) => format!("`{name}` takes no parameter, got `{p}`"),
        (ParamDomain::Tables(_), None) => format!("`{name}` requires a table parameter"),
        (ParamDomain::Tables(tables), Some(p)) => {
            if tables.contains(p) {
                return;
            }
            format!("`{name}` parameter `{p}` is not a known table")
        }
    };
    report.violations.push(Violation {
        path: path.clone(),
        code: ViolationCode::BadParam,
        severity: Severity::Error,
        message,
    });
}

/// Pulls the first balanced parenthesized expression whose head token is
/// one of `seq`/`fb`/`par`/`act`/`cond` out of a free-form reply,
/// ignoring surrounding prose and code fences. The returned substring
/// still has to pass [`parse`] and [`validate`].
pub fn extract_tree(llm_reply: &str) -> Result<String, ParseError> {
    let bytes = llm_reply.as_bytes();
    let mut saw_candidate: Option<usize> = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'(' && head_is_tree_kind(&llm_reply[i + 1..]) {
            match balanced_end(bytes, i) {
                Some(end) => return Ok(llm_reply[i..=end].to_string()),
                None => saw_candidate = saw_candidate.or(Some(i)),
            }
        }
        i += 1;
    }
    match saw_candidate {
        Some(start) => {
            let pos = offset_to_pos(llm_reply, start);
            Err(ParseError::new(pos, ParseErrorCode::UnbalancedParen, "tree expression never closes"))
        }
        None => Err(ParseError::new((1, 1), ParseErrorCode::BadToken, "reply contains no tree expression")),
    }
}

fn head_is_tree_kind(rest: &str) -> bool {
    let trimmed = rest.trim_start();
    let head: String = trimmed
        .chars()
        .take_while(|c| !c.is_whitespace() && *c != '(' && *c != ')')
        .flat_map(char::to_lowercase)
        .collect();
    matches!(head.as_str(), "seq" | "fb" | "par" | "act" | "cond")
}

fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, b) in bytes.iter().enumerate().skip(start) {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn offset_to_pos(text: &str, offset: usize) -> (u32, u32) {
    let mut line = 1u32;
    let mut col = 1u32;
    for (i, ch) in text.char_indices() {
        if i >= offset {
            break;
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}
