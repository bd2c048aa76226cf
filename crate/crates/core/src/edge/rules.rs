//! Rule language.
//!
//! ```text
//! rule    := "WHEN" cond ("FOR" INT "TICKS")? "THEN" action ("PRIORITY" INT)?
//! cond    := term ("OR" term)*
//! term    := factor ("AND" factor)*
//! factor  := operand CMP NUMBER | "(" cond ")"
//! operand := PROP_PATH | AGG "(" PROP_PATH "," INT ")"
//! AGG     := MEAN | MIN | MAX | STDDEV | EWMA
//! CMP     := ">" | ">=" | "<" | "<=" | "==" | "!="
//! action  := "SET" "(" DEVICE "," RESOURCE "," VALUE ")"
//!          | "NOTIFY" "(" TOPIC "," STRING ")"
//!          | "ESCALATE" "(" STRING ")"
//! ```
//!
//! `AND` binds tighter than `OR`; both associate to the left. Comparisons are
//! strict at the boundary: `MEAN(x,3) > 23` is false when the mean is exactly 23.
//! `EWMA(p, n)` smooths the last `n` samples with `alpha = 2 / (n + 1)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Payload;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub col: usize,
    pub expected: Vec<String>,
    pub found: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("syntax error at line {}, col {}: expected {}, found {}", .0.line, .0.col, .0.expected.join(" | "), .0.found)]
    SyntaxError(Diagnostic),
    #[error("unknown aggregate {name} at line {line}, col {col}")]
    UnknownAggregate { name: String, line: usize, col: usize },
    #[error("unresolved reference {reference:?}: {reason}")]
    UnresolvedReference { reference: String, reason: String },
}

impl RuleError {
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            RuleError::SyntaxError(d) => Some((d.line, d.col)),
            RuleError::UnknownAggregate { line, col, .. } => Some((*line, *col)),
            RuleError::UnresolvedReference { .. } => None,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            RuleError::SyntaxError(_) => "SyntaxError",
            RuleError::UnknownAggregate { .. } => "UnknownAggregate",
            RuleError::UnresolvedReference { .. } => "UnresolvedReference",
        }
    }

    fn at_line(self, line: usize) -> Self {
        match self {
            RuleError::SyntaxError(mut d) => {
                d.line = line;
                RuleError::SyntaxError(d)
            }
            RuleError::UnknownAggregate { name, col, .. } => RuleError::UnknownAggregate { name, line, col },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl Cmp {
    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Eq => "==",
            Cmp::Ne => "!=",
        }
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Eq => lhs == rhs,
            Cmp::Ne => lhs != rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Aggregate {
    Mean,
    Min,
    Max,
    Stddev,
    Ewma,
}

impl Aggregate {
    fn from_keyword(s: &str) -> Option<Self> {
        Some(match s {
            "MEAN" => Aggregate::Mean,
            "MIN" => Aggregate::Min,
            "MAX" => Aggregate::Max,
            "STDDEV" => Aggregate::Stddev,
            "EWMA" => Aggregate::Ewma,
            _ => return None,
        })
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Aggregate::Mean => "MEAN",
            Aggregate::Min => "MIN",
            Aggregate::Max => "MAX",
            Aggregate::Stddev => "STDDEV",
            Aggregate::Ewma => "EWMA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PropPath {
    pub thing: String,
    pub property: String,
}

impl fmt::Display for PropPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.thing, self.property)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Operand {
    Latest { path: PropPath },
    Aggregate { agg: Aggregate, path: PropPath, n: u32 },
}

impl Operand {
    pub fn path(&self) -> &PropPath {
        match self {
            Operand::Latest { path } | Operand::Aggregate { path, .. } => path,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Latest { path } => write!(f, "{path}"),
            Operand::Aggregate { agg, path, n } => write!(f, "{}({path}, {n})", agg.keyword()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Condition {
    Compare { operand: Operand, cmp: Cmp, value: f64 },
    And { left: Box<Condition>, right: Box<Condition> },
    Or { left: Box<Condition>, right: Box<Condition> },
}

impl Condition {
    pub fn operands(&self) -> Vec<&Operand> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Operand>) {
        match self {
            Condition::Compare { operand, .. } => out.push(operand),
            Condition::And { left, right } | Condition::Or { left, right } => {
                left.collect(out);
                right.collect(out);
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8, right_child: bool) -> fmt::Result {
        // precedence: OR = 1, AND = 2, comparison = 3
        let (prec, text) = match self {
            Condition::Compare { operand, cmp, value } => return write!(f, "{operand} {} {value}", cmp.symbol()),
            Condition::Or { .. } => (1, "OR"),
            Condition::And { .. } => (2, "AND"),
        };
        let (Condition::Or { left, right } | Condition::And { left, right }) = self else { unreachable!() };
        let parens = prec < parent || (prec == parent && right_child);
        if parens {
            f.write_str("(")?;
        }
        left.fmt_prec(f, prec, false)?;
        write!(f, " {text} ")?;
        right.fmt_prec(f, prec, true)?;
        if parens {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RuleAction {
    Set { device: String, resource: String, value: Payload },
    Notify { topic: String, message: String },
    Escalate { message: String },
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

impl fmt::Display for RuleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleAction::Set { device, resource, value } => {
                let v = match value {
                    Payload::Bool(b) => (if *b { "on" } else { "off" }).to_string(),
                    Payload::Float(x) => x.to_string(),
                    Payload::Text(s) => quote(s),
                };
                write!(f, "SET({device}, {resource}, {v})")
            }
            RuleAction::Notify { topic, message } => write!(f, "NOTIFY({topic}, {})", quote(message)),
            RuleAction::Escalate { message } => write!(f, "ESCALATE({})", quote(message)),
        }
    }
}

/// The syntax tree of one rule statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RuleAst {
    pub condition: Condition,
    pub for_ticks: Option<u32>,
    pub action: RuleAction,
    pub priority: i64,
}

impl fmt::Display for RuleAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WHEN {}", self.condition)?;
        if let Some(n) = self.for_ticks {
            write!(f, " FOR {n} TICKS")?;
        }
        write!(f, " THEN {}", self.action)?;
        if self.priority != 0 {
            write!(f, " PRIORITY {}", self.priority)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Number(String),
    Str(String),
    Cmp(Cmp),
    LParen,
    RParen,
    Comma,
    Dot,
    Slash,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => w.clone(),
            Tok::Number(n) => n.clone(),
            Tok::Str(s) => quote(s),
            Tok::Cmp(c) => c.symbol().to_string(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Dot => "'.'".into(),
            Tok::Slash => "'/'".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    col: usize,
}

fn syntax(col: usize, expected: &[&str], found: impl Into<String>) -> RuleError {
    RuleError::SyntaxError(Diagnostic {
        line: 1,
        col,
        expected: expected.iter().map(|s| s.to_string()).collect(),
        found: found.into(),
    })
}

fn lex(text: &str) -> Result<Vec<Spanned>, RuleError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            '.' => Some(Tok::Dot),
            '/' => Some(Tok::Slash),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Spanned { tok, col });
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied();
        if matches!(c, '>' | '<' | '=' | '!') {
            let (cmp, len) = match (c, next) {
                ('>', Some('=')) => (Cmp::Ge, 2),
                ('>', _) => (Cmp::Gt, 1),
                ('<', Some('=')) => (Cmp::Le, 2),
                ('<', _) => (Cmp::Lt, 1),
                ('=', Some('=')) => (Cmp::Eq, 2),
                ('!', Some('=')) => (Cmp::Ne, 2),
                _ => return Err(syntax(col, &["comparison operator"], c.to_string())),
            };
            out.push(Spanned { tok: Tok::Cmp(cmp), col });
            i += len;
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && next.is_some_and(|n| n.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            out.push(Spanned { tok: Tok::Number(chars[start..i].iter().collect()), col });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '-') {
                i += 1;
            }
            out.push(Spanned { tok: Tok::Word(chars[start..i].iter().collect()), col });
            continue;
        }
        if c == '"' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None | Some('\n') => return Err(syntax(i + 1, &["closing '\"'"], "end of input")),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        match chars.get(i + 1) {
                            Some(e @ ('"' | '\\')) => s.push(*e),
                            _ => return Err(syntax(i + 2, &["'\"'", "'\\\\'"], "bad escape")),
                        }
                        i += 2;
                    }
                    Some(other) => {
                        s.push(*other);
                        i += 1;
                    }
                }
            }
            out.push(Spanned { tok: Tok::Str(s), col });
            continue;
        }
        return Err(syntax(col, &["token"], c.to_string()));
    }
    out.push(Spanned { tok: Tok::End, col: chars.len() + 1 });
    Ok(out)
}

const KEYWORDS: &[&str] = &[
    "WHEN", "FOR", "TICKS", "THEN", "PRIORITY", "AND", "OR", "SET", "NOTIFY", "ESCALATE", "MEAN", "MIN", "MAX", "STDDEV",
    "EWMA",
];

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, RuleError> {
        let t = self.peek();
        Err(syntax(t.col, expected, t.tok.describe()))
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Word(w) if w == kw)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), RuleError> {
        if self.is_kw(kw) {
            self.bump();
            Ok(())
        } else {
            self.fail(&[kw])
        }
    }

    fn punct(&mut self, want: Tok, label: &str) -> Result<(), RuleError> {
        if self.peek().tok == want {
            self.bump();
            Ok(())
        } else {
            self.fail(&[label])
        }
    }

    fn ident(&mut self, label: &str) -> Result<String, RuleError> {
        match &self.peek().tok {
            Tok::Word(w) if !KEYWORDS.contains(&w.as_str()) => {
                let w = w.clone();
                self.bump();
                Ok(w)
            }
            _ => self.fail(&[label]),
        }
    }

    fn int(&mut self, label: &str) -> Result<i64, RuleError> {
        match &self.peek().tok {
            Tok::Number(n) if !n.contains('.') => match n.parse::<i64>() {
                Ok(v) => {
                    self.bump();
                    Ok(v)
                }
                Err(_) => self.fail(&[label]),
            },
            _ => self.fail(&[label]),
        }
    }

    fn positive_int(&mut self, label: &str) -> Result<u32, RuleError> {
        let col = self.peek().col;
        let found = self.peek().tok.describe();
        let v = self.int(label)?;
        u32::try_from(v).ok().filter(|v| *v >= 1).ok_or_else(|| syntax(col, &[label], found))
    }

    fn rule(&mut self) -> Result<RuleAst, RuleError> {
        self.keyword("WHEN")?;
        let condition = self.cond()?;
        let for_ticks = if self.is_kw("FOR") {
            self.bump();
            let n = self.positive_int("positive INT")?;
            self.keyword("TICKS")?;
            Some(n)
        } else {
            None
        };
        if !self.is_kw("THEN") {
            let mut expected = vec!["AND", "OR", "THEN"];
            if for_ticks.is_none() {
                expected.push("FOR");
            }
            return self.fail(&expected);
        }
        self.bump();
        let action = self.action()?;
        let priority = if self.is_kw("PRIORITY") {
            self.bump();
            self.int("INT")?
        } else {
            0
        };
        if self.peek().tok != Tok::End {
            return self.fail(if priority == 0 { &["PRIORITY", "end of input"] } else { &["end of input"] });
        }
        Ok(RuleAst { condition, for_ticks, action, priority })
    }

    fn cond(&mut self) -> Result<Condition, RuleError> {
        let mut left = self.term()?;
        while self.is_kw("OR") {
            self.bump();
            let right = self.term()?;
            left = Condition::Or { left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn term(&mut self) -> Result<Condition, RuleError> {
        let mut left = self.factor()?;
        while self.is_kw("AND") {
            self.bump();
            let right = self.factor()?;
            left = Condition::And { left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn factor(&mut self) -> Result<Condition, RuleError> {
        if self.peek().tok == Tok::LParen {
            self.bump();
            let inner = self.cond()?;
            self.punct(Tok::RParen, "')'")?;
            return Ok(inner);
        }
        let operand = self.operand()?;
        let cmp = match self.peek().tok {
            Tok::Cmp(c) => {
                self.bump();
                c
            }
            _ => return self.fail(&[">", ">=", "<", "<=", "==", "!="]),
        };
        let value = match &self.peek().tok {
            Tok::Number(n) => {
                let v = n.parse::<f64>().expect("lexer only yields numeric text");
                self.bump();
                v
            }
            _ => return self.fail(&["NUMBER"]),
        };
        Ok(Condition::Compare { operand, cmp, value })
    }

    fn path(&mut self) -> Result<PropPath, RuleError> {
        let thing = self.ident("PROP_PATH")?;
        self.punct(Tok::Dot, "'.'")?;
        let property = self.ident("property name")?;
        Ok(PropPath { thing, property })
    }

    fn operand(&mut self) -> Result<Operand, RuleError> {
        if let Tok::Word(w) = &self.peek().tok {
            if *self.peek_at(1) == Tok::LParen {
                let col = self.peek().col;
                let Some(agg) = Aggregate::from_keyword(w) else {
                    return Err(RuleError::UnknownAggregate { name: w.clone(), line: 1, col });
                };
                self.bump();
                self.bump();
                let path = self.path()?;
                self.punct(Tok::Comma, "','")?;
                let n = self.positive_int("positive INT")?;
                self.punct(Tok::RParen, "')'")?;
                return Ok(Operand::Aggregate { agg, path, n });
            }
        }
        match &self.peek().tok {
            Tok::Word(w) if !KEYWORDS.contains(&w.as_str()) => Ok(Operand::Latest { path: self.path()? }),
            _ => self.fail(&["PROP_PATH", "AGG", "'('"]),
        }
    }

    fn action(&mut self) -> Result<RuleAction, RuleError> {
        if self.is_kw("SET") {
            self.bump();
            self.punct(Tok::LParen, "'('")?;
            let device = self.ident("DEVICE")?;
            self.punct(Tok::Comma, "','")?;
            let resource = self.ident("RESOURCE")?;
            self.punct(Tok::Comma, "','")?;
            let value = match self.peek().tok.clone() {
                Tok::Word(w) if matches!(w.as_str(), "on" | "true") => Payload::Bool(true),
                Tok::Word(w) if matches!(w.as_str(), "off" | "false") => Payload::Bool(false),
                Tok::Number(n) => Payload::Float(n.parse().expect("numeric text")),
                Tok::Str(s) => Payload::Text(s),
                _ => return self.fail(&["on", "off", "NUMBER", "STRING"]),
            };
            self.bump();
            self.punct(Tok::RParen, "')'")?;
            Ok(RuleAction::Set { device, resource, value })
        } else if self.is_kw("NOTIFY") {
            self.bump();
            self.punct(Tok::LParen, "'('")?;
            let mut topic = self.ident("TOPIC")?;
            while self.peek().tok == Tok::Slash {
                self.bump();
                topic.push('/');
                topic.push_str(&self.ident("TOPIC segment")?);
            }
            self.punct(Tok::Comma, "','")?;
            let message = self.string()?;
            self.punct(Tok::RParen, "')'")?;
            Ok(RuleAction::Notify { topic, message })
        } else if self.is_kw("ESCALATE") {
            self.bump();
            self.punct(Tok::LParen, "'('")?;
            let message = self.string()?;
            self.punct(Tok::RParen, "')'")?;
            Ok(RuleAction::Escalate { message })
        } else {
            self.fail(&["SET", "NOTIFY", "ESCALATE"])
        }
    }

    fn string(&mut self) -> Result<String, RuleError> {
        match &self.peek().tok {
            Tok::Str(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => self.fail(&["STRING"]),
        }
    }
}

/// Parses a single rule statement. Positions are 1-based; the line is always 1.
pub fn parse_rule(text: &str) -> Result<RuleAst, RuleError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.rule()
}

/// One statement from a rule file.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleLine {
    pub line: usize,
    pub text: String,
    pub ast: RuleAst,
}

/// Parses a rule file: one rule per line, blank lines and `#` comments
/// ignored. Returns every statement or every error, with file line numbers.
pub fn parse_rule_file(text: &str) -> Result<Vec<RuleLine>, Vec<RuleError>> {
    let mut rules = Vec::new();
    let mut errors = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_rule(raw) {
            Ok(ast) => rules.push(RuleLine { line, text: trimmed.to_string(), ast }),
            Err(e) => errors.push(e.at_line(line)),
        }
    }
    if errors.is_empty() {
        Ok(rules)
    } else {
        Err(errors)
    }
}
