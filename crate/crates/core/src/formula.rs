//! Model formulas in the lme4 dialect.
//!
//! ```text
//! log(RT) ~ 1 + modality + (1 + modality | subject) + (1 | stimulus)
//! y ~ condition*altitude + (1 | classroom/student) + (1 + x || g)
//! ```
//!
//! Binding strength, loosest first: `|`/`||` (inside parentheses only), `+`,
//! `*`, `:`, `/`. The intercept is implicit; `0 +` or `- 1` removes it.
//! `log()` is accepted on the response only and `I(x^k)` on predictors.
//!
//! [`parse_formula`] keeps the shorthand operators; [`expand_terms`] rewrites
//! them into canonical term lists.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("formula error at position {pos}: {kind}")]
pub struct ParseError {
    /// Byte offset into the formula text.
    pub pos: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("empty formula")]
    Empty,
    #[error("expected exactly one `~`")]
    Tilde,
    #[error("unexpected character `{0}`")]
    BadChar(char),
    #[error("unexpected {0}")]
    Unexpected(String),
    #[error("unmatched parenthesis")]
    UnmatchedParen,
    #[error("random-effect term has an empty grouping")]
    EmptyGrouping,
    #[error("`|` is only allowed inside a parenthesised random-effect term")]
    BareBar,
    #[error("unknown function `{0}` (supported: log on the response, I(x^k) on predictors)")]
    UnknownFunction(String),
    #[error("power must be a positive integer")]
    BadPower,
    #[error("{0}")]
    Invalid(String),
}

/// A predictor variable, optionally raised to an integer power (`I(x^k)`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct VarRef {
    pub name: String,
    pub power: u32,
}

impl VarRef {
    pub fn new(name: impl Into<String>) -> Self {
        VarRef {
            name: name.into(),
            power: 1,
        }
    }

    pub fn pow(name: impl Into<String>, power: u32) -> Self {
        VarRef {
            name: name.into(),
            power,
        }
    }
}

impl fmt::Display for VarRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.power == 1 {
            write!(f, "{}", self.name)
        } else {
            write!(f, "I({}^{})", self.name, self.power)
        }
    }
}

/// A main effect or interaction: the variables multiplied together, in
/// written order and without repeats.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct FixedTerm {
    pub vars: Vec<VarRef>,
}

impl FixedTerm {
    pub fn new(vars: Vec<VarRef>) -> Self {
        let mut t = FixedTerm { vars: Vec::new() };
        for v in vars {
            t.push(v);
        }
        t
    }

    pub fn var(name: &str) -> Self {
        FixedTerm {
            vars: vec![VarRef::new(name)],
        }
    }

    fn push(&mut self, v: VarRef) {
        if !self.vars.contains(&v) {
            self.vars.push(v);
        }
    }

    /// Interaction order (number of variables).
    pub fn order(&self) -> usize {
        self.vars.len()
    }

    /// Term equality ignoring variable order (`a:b` is `b:a`).
    pub fn same_as(&self, other: &FixedTerm) -> bool {
        self.vars.len() == other.vars.len() && self.vars.iter().all(|v| other.vars.contains(v))
    }

    pub fn union(&self, other: &FixedTerm) -> FixedTerm {
        let mut t = self.clone();
        for v in &other.vars {
            t.push(v.clone());
        }
        t
    }

    pub fn contains(&self, v: &VarRef) -> bool {
        self.vars.contains(v)
    }

    pub fn label(&self) -> String {
        self.vars
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(":")
    }
}

impl fmt::Display for FixedTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Fixed-part expression before expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum TermExpr {
    Term(FixedTerm),
    /// Parenthesised sum, e.g. the `(a + b)` of `(a + b)*c`.
    Sum(Vec<TermExpr>),
    Cross(Box<TermExpr>, Box<TermExpr>),
    Colon(Box<TermExpr>, Box<TermExpr>),
    Nest(Box<TermExpr>, Box<TermExpr>),
}

/// Grouping factor expression of a random-effect term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum GroupingExpr {
    /// One factor, or the interaction `a:b` of several (written order kept,
    /// since it decides the concatenated level labels).
    Factors(Vec<String>),
    /// `a/b`, shorthand for `a` and `a:b`.
    Nested(Box<GroupingExpr>, Box<GroupingExpr>),
}

impl GroupingExpr {
    pub fn factors(&self) -> Vec<String> {
        match self {
            GroupingExpr::Factors(v) => v.clone(),
            GroupingExpr::Nested(a, b) => {
                let mut out = a.factors();
                for f in b.factors() {
                    if !out.contains(&f) {
                        out.push(f);
                    }
                }
                out
            }
        }
    }

    /// Grouping label used for covariance tables, e.g. `subject:condition`.
    pub fn label(&self) -> String {
        match self {
            GroupingExpr::Factors(v) => v.join(":"),
            GroupingExpr::Nested(a, b) => format!("{}/{}", a.label(), b.label()),
        }
    }

    fn same_as(&self, other: &GroupingExpr) -> bool {
        match (self, other) {
            (GroupingExpr::Factors(a), GroupingExpr::Factors(b)) => {
                a.len() == b.len() && a.iter().all(|x| b.contains(x))
            }
            _ => self == other,
        }
    }
}

/// A parenthesised random-effect term `(inner | grouping)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RandomTerm {
    pub intercept: bool,
    pub inner: Vec<TermExpr>,
    pub grouping: GroupingExpr,
    /// `|` gives a full covariance matrix, `||` a diagonal one.
    pub correlated: bool,
}

impl RandomTerm {
    /// Canonical inner terms; only meaningful after [`expand_terms`].
    pub fn inner_terms(&self) -> Vec<FixedTerm> {
        expand_list(&self.inner)
    }

    /// Grouping factor names; only meaningful after [`expand_terms`].
    pub fn group_factors(&self) -> Vec<String> {
        self.grouping.factors()
    }

    /// Subject-grouped slope check: does the inner design mention `var`?
    pub fn has_slope_on(&self, var: &str) -> bool {
        self.inner_terms()
            .iter()
            .any(|t| t.vars.iter().any(|v| v.name == var))
    }

    fn same_as(&self, other: &RandomTerm) -> bool {
        let a = self.inner_terms();
        let b = other.inner_terms();
        self.intercept == other.intercept
            && self.correlated == other.correlated
            && self.grouping.same_as(&other.grouping)
            && a.len() == b.len()
            && a.iter().all(|t| b.iter().any(|u| u.same_as(t)))
    }
}

/// Response column with an optional natural-log transform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Response {
    pub column: String,
    pub log: bool,
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.log {
            write!(f, "log({})", self.column)
        } else {
            f.write_str(&self.column)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FormulaAst {
    pub response: Response,
    pub intercept: bool,
    pub fixed: Vec<TermExpr>,
    pub random: Vec<RandomTerm>,
}

impl FormulaAst {
    /// Canonical fixed terms (expands shorthand if still present).
    pub fn fixed_terms(&self) -> Vec<FixedTerm> {
        expand_list(&self.fixed)
    }

    /// Every column the formula reads.
    pub fn referenced_columns(&self) -> Vec<String> {
        let mut out = vec![self.response.column.clone()];
        let mut add = |name: &str| {
            if !out.iter().any(|o| o == name) {
                out.push(name.to_string());
            }
        };
        for t in self.fixed_terms() {
            for v in &t.vars {
                add(&v.name);
            }
        }
        for r in &self.random {
            for t in r.inner_terms() {
                for v in &t.vars {
                    add(&v.name);
                }
            }
            for g in r.group_factors() {
                add(&g);
            }
        }
        out
    }
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ {}", self.response, if self.intercept { 1 } else { 0 })?;
        for t in &self.fixed {
            write!(f, " + {}", ExprDisplay(t, 0))?;
        }
        for r in &self.random {
            write!(f, " + ({}", if r.intercept { 1 } else { 0 })?;
            for t in &r.inner {
                write!(f, " + {}", ExprDisplay(t, 0))?;
            }
            let bar = if r.correlated { "|" } else { "||" };
            write!(f, " {bar} {})", GroupDisplay(&r.grouping, 0))?;
        }
        Ok(())
    }
}

// Precedence levels for printing: 0 sum, 1 cross, 2 colon, 3 nest.
struct ExprDisplay<'a>(&'a TermExpr, u8);

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (own, body) = match self.0 {
            TermExpr::Term(t) if t.order() > 1 => (2, t.label()),
            TermExpr::Term(t) => (4, t.label()),
            TermExpr::Sum(v) => (
                0,
                v.iter()
                    .map(|e| ExprDisplay(e, 0).to_string())
                    .collect::<Vec<_>>()
                    .join(" + "),
            ),
            TermExpr::Cross(a, b) => (1, format!("{}*{}", ExprDisplay(a, 1), ExprDisplay(b, 2))),
            TermExpr::Colon(a, b) => (2, format!("{}:{}", ExprDisplay(a, 2), ExprDisplay(b, 3))),
            TermExpr::Nest(a, b) => (3, format!("{}/{}", ExprDisplay(a, 3), ExprDisplay(b, 4))),
        };
        if own < self.1 || (matches!(self.0, TermExpr::Sum(_)) && self.1 == 0) {
            write!(f, "({body})")
        } else {
            f.write_str(&body)
        }
    }
}

struct GroupDisplay<'a>(&'a GroupingExpr, u8);

impl fmt::Display for GroupDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            GroupingExpr::Factors(v) => {
                if v.len() > 1 && self.1 >= 3 {
                    write!(f, "({})", v.join(":"))
                } else {
                    f.write_str(&v.join(":"))
                }
            }
            GroupingExpr::Nested(a, b) => {
                let body = format!("{}/{}", GroupDisplay(a, 3), GroupDisplay(b, 4));
                if self.1 >= 3 {
                    write!(f, "({body})")
                } else {
                    f.write_str(&body)
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Tilde,
    Plus,
    Minus,
    Star,
    Colon,
    Slash,
    Caret,
    LParen,
    RParen,
    Bar,
    DoubleBar,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Num(s) => format!("number `{s}`"),
            Tok::End => "end of formula".to_string(),
            Tok::Tilde => "`~`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Bar => "`|`".into(),
            Tok::DoubleBar => "`||`".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let mut out = Vec::new();
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < bytes.len() {
        let (pos, c) = bytes[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '#' => {
                while i < bytes.len() && bytes[i].1 != '\n' {
                    i += 1;
                }
            }
            '~' | '+' | '-' | '*' | ':' | '/' | '^' | '(' | ')' => {
                out.push((
                    match c {
                        '~' => Tok::Tilde,
                        '+' => Tok::Plus,
                        '-' => Tok::Minus,
                        '*' => Tok::Star,
                        ':' => Tok::Colon,
                        '/' => Tok::Slash,
                        '^' => Tok::Caret,
                        '(' => Tok::LParen,
                        _ => Tok::RParen,
                    },
                    pos,
                ));
                i += 1;
            }
            '|' => {
                if i + 1 < bytes.len() && bytes[i + 1].1 == '|' {
                    out.push((Tok::DoubleBar, pos));
                    i += 2;
                } else {
                    out.push((Tok::Bar, pos));
                    i += 1;
                }
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < bytes.len() && (bytes[i].1.is_ascii_digit() || bytes[i].1 == '.') {
                    i += 1;
                }
                let s: String = bytes[start..i].iter().map(|b| b.1).collect();
                out.push((Tok::Num(s), pos));
            }
            c if c.is_alphabetic() || c == '_' || c == '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].1.is_alphanumeric() || bytes[i].1 == '_' || bytes[i].1 == '.')
                {
                    i += 1;
                }
                let s: String = bytes[start..i].iter().map(|b| b.1).collect();
                out.push((Tok::Ident(s), pos));
            }
            other => {
                return Err(ParseError {
                    pos,
                    kind: ParseErrorKind::BadChar(other),
                })
            }
        }
    }
    out.push((Tok::End, text.len()));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone)]
enum Node {
    One(usize),
    Zero(usize),
    Var(VarRef, usize),
    Sum(Vec<(bool, Node)>, usize),
    Cross(Box<Node>, Box<Node>),
    Colon(Box<Node>, Box<Node>),
    Nest(Box<Node>, Box<Node>),
    Random {
        lhs: Box<Node>,
        group: Box<Node>,
        correlated: bool,
        pos: usize,
    },
}

impl Node {
    fn pos(&self) -> usize {
        match self {
            Node::One(p) | Node::Zero(p) | Node::Var(_, p) | Node::Sum(_, p) => *p,
            Node::Random { pos, .. } => *pos,
            Node::Cross(a, _) | Node::Colon(a, _) | Node::Nest(a, _) => a.pos(),
        }
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, kind: ParseErrorKind) -> Result<T, ParseError> {
        Err(ParseError {
            pos: self.pos(),
            kind,
        })
    }

    fn unexpected<T>(&self) -> Result<T, ParseError> {
        let kind = match self.peek() {
            Tok::End => ParseErrorKind::Unexpected("end of formula".into()),
            Tok::Bar | Tok::DoubleBar => ParseErrorKind::BareBar,
            t => ParseErrorKind::Unexpected(t.describe()),
        };
        self.err(kind)
    }

    fn sum(&mut self) -> Result<Node, ParseError> {
        let start = self.pos();
        let mut items = Vec::new();
        let mut positive = true;
        if *self.peek() == Tok::Minus {
            self.bump();
            positive = false;
        } else if *self.peek() == Tok::Plus {
            self.bump();
        }
        loop {
            let node = self.cross()?;
            items.push((positive, node));
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    positive = true;
                }
                Tok::Minus => {
                    self.bump();
                    positive = false;
                }
                _ => break,
            }
        }
        if items.len() == 1 && items[0].0 {
            Ok(items.pop().unwrap().1)
        } else {
            Ok(Node::Sum(items, start))
        }
    }

    fn cross(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.colon()?;
        while *self.peek() == Tok::Star {
            self.bump();
            let rhs = self.colon()?;
            lhs = Node::Cross(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn colon(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.nest()?;
        while *self.peek() == Tok::Colon {
            self.bump();
            let rhs = self.nest()?;
            lhs = Node::Colon(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn nest(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.atom()?;
        while *self.peek() == Tok::Slash {
            self.bump();
            let rhs = self.atom()?;
            lhs = Node::Nest(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Num(s) => {
                self.bump();
                match s.as_str() {
                    "1" => Ok(Node::One(pos)),
                    "0" => Ok(Node::Zero(pos)),
                    _ => Err(ParseError {
                        pos,
                        kind: ParseErrorKind::Invalid(format!(
                            "numeric constant `{s}` is not a term (only 0 and 1 are allowed)"
                        )),
                    }),
                }
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen {
                    self.call(name, pos)
                } else {
                    Ok(Node::Var(VarRef::new(name), pos))
                }
            }
            Tok::LParen => {
                self.bump();
                let inner = self.sum()?;
                match self.peek() {
                    Tok::Bar | Tok::DoubleBar => {
                        let correlated = *self.peek() == Tok::Bar;
                        self.bump();
                        match self.peek() {
                            Tok::End => {
                                return Err(ParseError {
                                    pos,
                                    kind: ParseErrorKind::UnmatchedParen,
                                })
                            }
                            Tok::RParen => return self.err(ParseErrorKind::EmptyGrouping),
                            _ => {}
                        }
                        let group = self.sum()?;
                        self.close_paren(pos)?;
                        Ok(Node::Random {
                            lhs: Box::new(inner),
                            group: Box::new(group),
                            correlated,
                            pos,
                        })
                    }
                    _ => {
                        self.close_paren(pos)?;
                        Ok(match inner {
                            Node::Sum(items, p) => Node::Sum(items, p),
                            other => Node::Sum(vec![(true, other)], pos),
                        })
                    }
                }
            }
            _ => self.unexpected(),
        }
    }

    fn close_paren(&mut self, open: usize) -> Result<(), ParseError> {
        match self.peek() {
            Tok::RParen => {
                self.bump();
                Ok(())
            }
            Tok::End => Err(ParseError {
                pos: open,
                kind: ParseErrorKind::UnmatchedParen,
            }),
            _ => self.unexpected(),
        }
    }

    fn call(&mut self, name: String, pos: usize) -> Result<Node, ParseError> {
        if name != "I" {
            return Err(ParseError {
                pos,
                kind: ParseErrorKind::UnknownFunction(name),
            });
        }
        self.bump(); // (
        let var = match self.bump() {
            (Tok::Ident(v), _) => v,
            (Tok::End, _) => {
                return Err(ParseError {
                    pos,
                    kind: ParseErrorKind::UnmatchedParen,
                })
            }
            (t, p) => {
                return Err(ParseError {
                    pos: p,
                    kind: ParseErrorKind::Unexpected(t.describe()),
                })
            }
        };
        let power = if *self.peek() == Tok::Caret {
            self.bump();
            match self.bump() {
                (Tok::Num(s), p) => match s.parse::<u32>() {
                    Ok(k) if k >= 1 => k,
                    _ => {
                        return Err(ParseError {
                            pos: p,
                            kind: ParseErrorKind::BadPower,
                        })
                    }
                },
                (_, p) => {
                    return Err(ParseError {
                        pos: p,
                        kind: ParseErrorKind::BadPower,
                    })
                }
            }
        } else {
            1
        };
        self.close_paren(pos)?;
        Ok(Node::Var(VarRef::pow(var, power), pos))
    }
}

fn invalid<T>(pos: usize, msg: &str) -> Result<T, ParseError> {
    Err(ParseError {
        pos,
        kind: ParseErrorKind::Invalid(msg.to_string()),
    })
}

fn to_expr(node: &Node) -> Result<TermExpr, ParseError> {
    Ok(match node {
        Node::Var(v, _) => TermExpr::Term(FixedTerm {
            vars: vec![v.clone()],
        }),
        Node::One(p) | Node::Zero(p) => {
            return invalid(*p, "intercept markers 0/1 may only appear as sum terms")
        }
        Node::Random { pos, .. } => {
            return invalid(*pos, "random-effect terms may only appear at the top level")
        }
        Node::Sum(items, p) => {
            let mut out = Vec::new();
            for (positive, n) in items {
                if !positive {
                    return invalid(*p, "term removal is only supported for the intercept (-1)");
                }
                out.push(to_expr(n)?);
            }
            TermExpr::Sum(out)
        }
        Node::Cross(a, b) => TermExpr::Cross(Box::new(to_expr(a)?), Box::new(to_expr(b)?)),
        Node::Colon(a, b) => match (to_expr(a)?, to_expr(b)?) {
            (TermExpr::Term(x), TermExpr::Term(y)) => TermExpr::Term(x.union(&y)),
            (x, y) => TermExpr::Colon(Box::new(x), Box::new(y)),
        },
        Node::Nest(a, b) => TermExpr::Nest(Box::new(to_expr(a)?), Box::new(to_expr(b)?)),
    })
}

fn to_group(node: &Node) -> Result<GroupingExpr, ParseError> {
    Ok(match node {
        Node::Var(v, p) => {
            if v.power != 1 {
                return invalid(*p, "grouping factors cannot be transformed");
            }
            GroupingExpr::Factors(vec![v.name.clone()])
        }
        Node::Colon(a, b) => {
            let mut fs = match to_group(a)? {
                GroupingExpr::Factors(f) => f,
                _ => return invalid(node.pos(), "`/` inside `:` is not supported in groupings"),
            };
            match to_group(b)? {
                GroupingExpr::Factors(g) => {
                    for x in g {
                        if !fs.contains(&x) {
                            fs.push(x);
                        }
                    }
                }
                _ => return invalid(node.pos(), "`/` inside `:` is not supported in groupings"),
            }
            GroupingExpr::Factors(fs)
        }
        Node::Nest(a, b) => GroupingExpr::Nested(Box::new(to_group(a)?), Box::new(to_group(b)?)),
        Node::Sum(items, p) if items.len() == 1 && items[0].0 => {
            let _ = p;
            to_group(&items[0].1)?
        }
        other => return invalid(other.pos(), "grouping must be a factor, a:b, or a/b"),
    })
}

/// Split a sum into (intercept, terms, random terms).
fn split_sum(
    node: &Node,
    allow_random: bool,
) -> Result<(bool, Vec<TermExpr>, Vec<RandomTerm>), ParseError> {
    let items: Vec<(bool, &Node)> = match node {
        Node::Sum(items, _) => items.iter().map(|(s, n)| (*s, n)).collect(),
        other => vec![(true, other)],
    };
    let mut intercept = true;
    let mut terms = Vec::new();
    let mut random = Vec::new();
    for (positive, n) in items {
        match (positive, n) {
            (true, Node::One(_)) => intercept = true,
            (true, Node::Zero(_)) | (false, Node::One(_)) => intercept = false,
            (false, Node::Zero(_)) => intercept = true,
            (true, Node::Random {
                lhs,
                group,
                correlated,
                pos,
            }) => {
                if !allow_random {
                    return invalid(*pos, "random-effect terms cannot be nested");
                }
                let (icpt, inner, nested) = split_sum(lhs, false)?;
                debug_assert!(nested.is_empty());
                if !icpt && inner.is_empty() {
                    return invalid(*pos, "random-effect term has no columns");
                }
                random.push(RandomTerm {
                    intercept: icpt,
                    inner,
                    grouping: to_group(group)?,
                    correlated: *correlated,
                });
            }
            (false, other) => {
                return invalid(
                    other.pos(),
                    "term removal is only supported for the intercept (-1)",
                )
            }
            (true, other) => terms.push(to_expr(other)?),
        }
    }
    Ok((intercept, terms, random))
}

/// Parse formula text into an AST, keeping `*`, `/` and `||` shorthand.
pub fn parse_formula(text: &str) -> Result<FormulaAst, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError {
            pos: 0,
            kind: ParseErrorKind::Empty,
        });
    }
    let toks = lex(text)?;
    let tildes: Vec<usize> = toks
        .iter()
        .filter(|(t, _)| *t == Tok::Tilde)
        .map(|(_, p)| *p)
        .collect();
    if tildes.len() != 1 {
        return Err(ParseError {
            pos: tildes.get(1).copied().unwrap_or(0),
            kind: ParseErrorKind::Tilde,
        });
    }
    let mut p = Parser { toks, at: 0 };

    let response = match p.bump() {
        (Tok::Ident(name), pos) => {
            if *p.peek() == Tok::LParen {
                if name != "log" {
                    return Err(ParseError {
                        pos,
                        kind: ParseErrorKind::UnknownFunction(name),
                    });
                }
                p.bump();
                let col = match p.bump() {
                    (Tok::Ident(c), _) => c,
                    (t, pos) => {
                        return Err(ParseError {
                            pos,
                            kind: ParseErrorKind::Unexpected(t.describe()),
                        })
                    }
                };
                p.close_paren(pos)?;
                Response {
                    column: col,
                    log: true,
                }
            } else {
                Response {
                    column: name,
                    log: false,
                }
            }
        }
        (t, pos) => {
            return Err(ParseError {
                pos,
                kind: ParseErrorKind::Unexpected(t.describe()),
            })
        }
    };
    if *p.peek() != Tok::Tilde {
        return p.unexpected();
    }
    p.bump();
    let rhs = p.sum()?;
    match p.peek() {
        Tok::End => {}
        Tok::RParen => return p.err(ParseErrorKind::UnmatchedParen),
        _ => return p.unexpected(),
    }
    let (intercept, fixed, random) = split_sum(&rhs, true)?;
    Ok(FormulaAst {
        response,
        intercept,
        fixed,
        random,
    })
}

// ---------------------------------------------------------------------------
// Expansion

fn expand_expr(e: &TermExpr) -> Vec<FixedTerm> {
    match e {
        TermExpr::Term(t) => vec![t.clone()],
        TermExpr::Sum(v) => v.iter().flat_map(expand_expr).collect(),
        TermExpr::Colon(a, b) => {
            let (a, b) = (expand_expr(a), expand_expr(b));
            a.iter()
                .flat_map(|x| b.iter().map(move |y| x.union(y)))
                .collect()
        }
        TermExpr::Cross(a, b) => {
            let (a, b) = (expand_expr(a), expand_expr(b));
            let mut out = a.clone();
            out.extend(b.iter().cloned());
            out.extend(a.iter().flat_map(|x| b.iter().map(move |y| x.union(y))));
            out
        }
        TermExpr::Nest(a, b) => {
            let (a, b) = (expand_expr(a), expand_expr(b));
            let all = a
                .iter()
                .fold(FixedTerm { vars: Vec::new() }, |acc, t| acc.union(t));
            let mut out = a;
            out.extend(b.iter().map(|y| all.union(y)));
            out
        }
    }
}

/// Expand, drop duplicates (first occurrence wins) and order by interaction
/// order, stably.
fn expand_list(exprs: &[TermExpr]) -> Vec<FixedTerm> {
    let mut out: Vec<FixedTerm> = Vec::new();
    for t in exprs.iter().flat_map(expand_expr) {
        if !out.iter().any(|o| o.same_as(&t)) {
            out.push(t);
        }
    }
    out.sort_by_key(|t| t.order());
    out
}

fn expand_group(g: &GroupingExpr) -> Vec<Vec<String>> {
    match g {
        GroupingExpr::Factors(v) => vec![v.clone()],
        GroupingExpr::Nested(a, b) => {
            let outer = expand_group(a);
            let mut all: Vec<String> = Vec::new();
            for f in outer.iter().flatten() {
                if !all.contains(f) {
                    all.push(f.clone());
                }
            }
            let mut out = outer;
            for inner in expand_group(b) {
                let mut g = all.clone();
                for f in inner {
                    if !g.contains(&f) {
                        g.push(f);
                    }
                }
                out.push(g);
            }
            out
        }
    }
}

/// Rewrite shorthand into canonical term lists: `a*b` becomes `a + b + a:b`,
/// `(x | g1/g2)` becomes `(x | g1) + (x | g1:g2)`, duplicates are dropped and
/// interactions follow their main effects.
pub fn expand_terms(ast: &FormulaAst) -> FormulaAst {
    let fixed = expand_list(&ast.fixed)
        .into_iter()
        .map(TermExpr::Term)
        .collect();
    let mut random: Vec<RandomTerm> = Vec::new();
    for r in &ast.random {
        let inner: Vec<TermExpr> = expand_list(&r.inner)
            .into_iter()
            .map(TermExpr::Term)
            .collect();
        for g in expand_group(&r.grouping) {
            let term = RandomTerm {
                intercept: r.intercept,
                inner: inner.clone(),
                grouping: GroupingExpr::Factors(g),
                correlated: r.correlated,
            };
            if !random.iter().any(|o| o.same_as(&term)) {
                random.push(term);
            }
        }
    }
    FormulaAst {
        response: ast.response.clone(),
        intercept: ast.intercept,
        fixed,
        random,
    }
}

/// Parse and expand in one step.
pub fn parse_expanded(text: &str) -> Result<FormulaAst, ParseError> {
    parse_formula(text).map(|f| expand_terms(&f))
}
