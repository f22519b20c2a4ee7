//! Expression language for vector fields, maps, event functions and set
//! predicates: parser, printer, evaluator and forward-mode derivatives.
//!
//! Variables are `x0, x1, ...`; any other identifier that is not a function
//! name is a parameter. Unary minus binds tighter than `^`, so `-x0^2` reads
//! as `(-x0)^2`. A minus sign directly in front of a number literal produces
//! a negative literal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown function {name} at line {line}, column {col}")]
    UnknownFunction { name: String, line: usize, col: usize },
    #[error("variable x{index} exceeds dimension {dim}")]
    DimOverflow { index: usize, dim: usize },
    #[error("unbound parameter {0}")]
    UnboundParam(String),
    #[error("input has {got} coordinates but x{index} is referenced")]
    DimMismatch { index: usize, got: usize },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite result in {0}")]
    NonFinite(&'static str),
    #[error("not differentiable: {0}")]
    NonDifferentiable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Atan2,
    Min,
    Max,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Atan2 => "atan2",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Atan2 | Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "atan2" => Func::Atan2,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Param(Arc<str>),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rel {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl Rel {
    pub fn symbol(self) -> &'static str {
        match self {
            Rel::Lt => "<",
            Rel::Le => "<=",
            Rel::Eq => "==",
            Rel::Ge => ">=",
            Rel::Gt => ">",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    True,
    False,
    Cmp(Expr, Rel, Expr),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

/// A map `ℝ^dim_in → ℝ^components.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorExpr {
    pub dim_in: usize,
    pub components: Vec<Expr>,
}

// ---------------------------------------------------------------------------
// construction helpers

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn param(name: &str) -> Expr {
        Expr::Param(Arc::from(name))
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::Neg(Box::new(a))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::Div(Box::new(a), Box::new(b))
    }

    pub fn pow(a: Expr, b: Expr) -> Expr {
        Expr::Pow(Box::new(a), Box::new(b))
    }

    pub fn call(f: Func, args: Vec<Expr>) -> Expr {
        assert_eq!(args.len(), f.arity());
        Expr::Call(f, args)
    }

    pub fn min(a: Expr, b: Expr) -> Expr {
        Expr::Call(Func::Min, vec![a, b])
    }

    pub fn max(a: Expr, b: Expr) -> Expr {
        Expr::Call(Func::Max, vec![a, b])
    }
}

impl Predicate {
    pub fn cmp(a: Expr, rel: Rel, b: Expr) -> Predicate {
        Predicate::Cmp(a, rel, b)
    }

    /// Conjunction that drops `true` and flattens nested conjunctions built here.
    pub fn and_all(parts: impl IntoIterator<Item = Predicate>) -> Predicate {
        let mut out = Vec::new();
        for p in parts {
            match p {
                Predicate::True => {}
                Predicate::False => return Predicate::False,
                Predicate::And(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        match out.len() {
            0 => Predicate::True,
            1 => out.pop().unwrap(),
            _ => Predicate::And(out),
        }
    }

    pub fn or_all(parts: impl IntoIterator<Item = Predicate>) -> Predicate {
        let mut out = Vec::new();
        for p in parts {
            match p {
                Predicate::False => {}
                Predicate::True => return Predicate::True,
                Predicate::Or(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        match out.len() {
            0 => Predicate::False,
            1 => out.pop().unwrap(),
            _ => Predicate::Or(out),
        }
    }

    pub fn negate(p: Predicate) -> Predicate {
        match p {
            Predicate::True => Predicate::False,
            Predicate::False => Predicate::True,
            other => Predicate::Not(Box::new(other)),
        }
    }
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    Rel(Rel),
    End,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map(|s| s.chars().count()).unwrap_or(0) + 1;
    (line, col)
}

fn syntax(src: &str, offset: usize, msg: impl Into<String>) -> ExprError {
    let (line, col) = line_col(src, offset);
    ExprError::Syntax { line, col, msg: msg.into() }
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let single = |t: Tok| Token { tok: t, offset: start };
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push(single(Tok::Plus)),
            b'-' => out.push(single(Tok::Minus)),
            b'*' => out.push(single(Tok::Star)),
            b'/' => out.push(single(Tok::Slash)),
            b'^' => out.push(single(Tok::Caret)),
            b'(' => out.push(single(Tok::LParen)),
            b')' => out.push(single(Tok::RParen)),
            b',' => out.push(single(Tok::Comma)),
            b'<' | b'>' | b'=' => {
                let eq_next = bytes.get(i + 1) == Some(&b'=');
                let rel = match (c, eq_next) {
                    (b'<', true) => Rel::Le,
                    (b'<', false) => Rel::Lt,
                    (b'>', true) => Rel::Ge,
                    (b'>', false) => Rel::Gt,
                    (b'=', true) => Rel::Eq,
                    _ => return Err(syntax(src, i, "expected '==' ")),
                };
                out.push(single(Tok::Rel(rel)));
                if eq_next {
                    i += 1;
                }
            }
            b'0'..=b'9' | b'.' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b'.') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let text = &src[i..j];
                let v: f64 = text.parse().map_err(|_| syntax(src, i, format!("bad number '{text}'")))?;
                out.push(Token { tok: Tok::Num(v), offset: i });
                i = j;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                out.push(Token { tok: Tok::Ident(src[i..j].to_string()), offset: i });
                i = j;
                continue;
            }
            _ => {
                let ch = src[i..].chars().next().unwrap();
                return Err(syntax(src, i, format!("unexpected character '{ch}'")));
            }
        }
        i += 1;
    }
    out.push(Token { tok: Tok::End, offset: src.len() });
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser

const KEYWORDS: [&str; 5] = ["and", "or", "not", "true", "false"];

struct Parser<'a> {
    src: &'a str,
    toks: Vec<Token>,
    pos: usize,
    dim: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, dim: usize) -> Result<Self, ExprError> {
        Ok(Parser { src, toks: lex(src)?, pos: 0, dim })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].offset
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, msg: impl Into<String>) -> ExprError {
        syntax(self.src, self.offset(), msg)
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), ExprError> {
        if *self.peek() == t {
            self.bump();
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn finish(&self) -> Result<(), ExprError> {
        if *self.peek() == Tok::End {
            Ok(())
        } else {
            Err(self.err("unexpected trailing input"))
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::add(lhs, self.term()?);
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::sub(lhs, self.term()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::mul(lhs, self.factor()?);
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::div(lhs, self.factor()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            let exp = self.atom()?;
            if *self.peek() == Tok::Caret {
                return Err(self.err("'^' is not associative; use parentheses"));
            }
            return Ok(Expr::pow(base, exp));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let offset = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Minus => {
                if let Tok::Num(v) = *self.peek() {
                    self.bump();
                    Ok(Expr::Num(-v))
                } else {
                    Ok(Expr::neg(self.atom()?))
                }
            }
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    let (line, col) = line_col(self.src, offset);
                    let f = Func::lookup(&name).ok_or(ExprError::UnknownFunction { name: name.clone(), line, col })?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "')'")?;
                    if args.len() != f.arity() {
                        return Err(syntax(
                            self.src,
                            offset,
                            format!("{} takes {} argument(s), got {}", f.name(), f.arity(), args.len()),
                        ));
                    }
                    return Ok(Expr::Call(f, args));
                }
                if KEYWORDS.contains(&name.as_str()) || Func::lookup(&name).is_some() {
                    return Err(syntax(self.src, offset, format!("'{name}' cannot be used as a value")));
                }
                if name == "pi" {
                    return Ok(Expr::Num(std::f64::consts::PI));
                }
                if let Some(index) = variable_index(&name) {
                    if index >= self.dim {
                        return Err(ExprError::DimOverflow { index, dim: self.dim });
                    }
                    return Ok(Expr::Var(index));
                }
                Ok(Expr::Param(Arc::from(name.as_str())))
            }
            Tok::End => Err(syntax(self.src, offset, "unexpected end of input")),
            other => Err(syntax(self.src, offset, format!("unexpected token {other:?}"))),
        }
    }

    fn pred_or(&mut self) -> Result<Predicate, ExprError> {
        let mut parts = vec![self.pred_and()?];
        while self.is_keyword("or") {
            self.bump();
            parts.push(self.pred_and()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Predicate::Or(parts) })
    }

    fn pred_and(&mut self) -> Result<Predicate, ExprError> {
        let mut parts = vec![self.pred_unary()?];
        while self.is_keyword("and") {
            self.bump();
            parts.push(self.pred_unary()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Predicate::And(parts) })
    }

    fn pred_unary(&mut self) -> Result<Predicate, ExprError> {
        if self.is_keyword("not") {
            self.bump();
            return Ok(Predicate::Not(Box::new(self.pred_unary()?)));
        }
        if self.is_keyword("true") {
            self.bump();
            return Ok(Predicate::True);
        }
        if self.is_keyword("false") {
            self.bump();
            return Ok(Predicate::False);
        }
        if *self.peek() == Tok::LParen {
            // either "(expr) REL expr" or "(pred)"
            let save = self.pos;
            match self.comparison() {
                Ok(p) => return Ok(p),
                Err(cmp_err) => {
                    self.pos = save;
                    self.bump();
                    let inner = self.pred_or();
                    match inner {
                        Ok(p) => {
                            self.expect(Tok::RParen, "')'")?;
                            return Ok(p);
                        }
                        Err(_) => return Err(cmp_err),
                    }
                }
            }
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Predicate, ExprError> {
        let lhs = self.expr()?;
        let rel = match self.peek() {
            Tok::Rel(r) => *r,
            _ => return Err(self.err("expected comparison operator")),
        };
        self.bump();
        let rhs = self.expr()?;
        Ok(Predicate::Cmp(lhs, rel, rhs))
    }
}

fn variable_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

pub fn parse_expr(text: &str, dim: usize) -> Result<Expr, ExprError> {
    let mut p = Parser::new(text, dim)?;
    let e = p.expr()?;
    p.finish()?;
    Ok(e)
}

pub fn parse_predicate(text: &str, dim: usize) -> Result<Predicate, ExprError> {
    let mut p = Parser::new(text, dim)?;
    let e = p.pred_or()?;
    p.finish()?;
    Ok(e)
}

pub fn parse_vector<S: AsRef<str>>(components: &[S], dim: usize) -> Result<VectorExpr, ExprError> {
    let components = components.iter().map(|c| parse_expr(c.as_ref(), dim)).collect::<Result<_, _>>()?;
    Ok(VectorExpr { dim_in: dim, components })
}

// ---------------------------------------------------------------------------
// printing

pub fn fmt_num(v: f64) -> String {
    let plain = format!("{v}");
    if plain.len() <= 18 {
        plain
    } else {
        format!("{v:e}")
    }
}

fn is_atomic(e: &Expr) -> bool {
    matches!(e, Expr::Var(_) | Expr::Param(_) | Expr::Call(..)) || matches!(e, Expr::Num(v) if *v >= 0.0 && !v.is_sign_negative())
}

fn is_unary(e: &Expr) -> bool {
    matches!(e, Expr::Neg(_)) || matches!(e, Expr::Num(v) if v.is_sign_negative())
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        Expr::Pow(..) => 3,
        _ => 4,
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, e: &Expr, wrap: bool) -> fmt::Result {
    if wrap {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => f.write_str(&fmt_num(*v)),
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Param(p) => f.write_str(p),
            Expr::Neg(a) => {
                f.write_str("-")?;
                write_wrapped(f, a, !is_atomic(a) || matches!(**a, Expr::Num(_)))
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                write_wrapped(f, a, prec(a) < 1)?;
                f.write_str(if matches!(self, Expr::Add(..)) { "+" } else { "-" })?;
                write_wrapped(f, b, prec(b) <= 1 || is_unary(b))
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                write_wrapped(f, a, prec(a) < 2)?;
                f.write_str(if matches!(self, Expr::Mul(..)) { "*" } else { "/" })?;
                write_wrapped(f, b, prec(b) <= 2 || is_unary(b))
            }
            Expr::Pow(a, b) => {
                write_wrapped(f, a, !is_atomic(a))?;
                f.write_str("^")?;
                write_wrapped(f, b, !is_atomic(b))
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::True => f.write_str("true"),
            Predicate::False => f.write_str("false"),
            Predicate::Cmp(a, r, b) => write!(f, "{a} {} {b}", r.symbol()),
            Predicate::And(ps) => {
                for (k, p) in ps.iter().enumerate() {
                    if k > 0 {
                        f.write_str(" and ")?;
                    }
                    if matches!(p, Predicate::And(_) | Predicate::Or(_)) {
                        write!(f, "({p})")?;
                    } else {
                        write!(f, "{p}")?;
                    }
                }
                Ok(())
            }
            Predicate::Or(ps) => {
                for (k, p) in ps.iter().enumerate() {
                    if k > 0 {
                        f.write_str(" or ")?;
                    }
                    if matches!(p, Predicate::Or(_)) {
                        write!(f, "({p})")?;
                    } else {
                        write!(f, "{p}")?;
                    }
                }
                Ok(())
            }
            Predicate::Not(p) => {
                if matches!(**p, Predicate::And(_) | Predicate::Or(_)) {
                    write!(f, "not ({p})")
                } else {
                    write!(f, "not {p}")
                }
            }
        }
    }
}

impl VectorExpr {
    pub fn new(dim_in: usize, components: Vec<Expr>) -> Self {
        VectorExpr { dim_in, components }
    }

    pub fn identity(n: usize) -> Self {
        VectorExpr { dim_in: n, components: (0..n).map(Expr::Var).collect() }
    }

    pub fn negation(n: usize) -> Self {
        VectorExpr { dim_in: n, components: (0..n).map(|i| Expr::neg(Expr::Var(i))).collect() }
    }

    pub fn zero(dim_in: usize, dim_out: usize) -> Self {
        VectorExpr { dim_in, components: vec![Expr::Num(0.0); dim_out] }
    }

    pub fn dim_out(&self) -> usize {
        self.components.len()
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.components.iter().map(|c| c.to_string()).collect()
    }

    pub fn eval(&self, x: &[f64], params: &Params) -> Result<Vec<f64>, ExprError> {
        self.components.iter().map(|c| c.eval(x, params)).collect()
    }

    /// Row-major `dim_out × dim_in` Jacobian.
    pub fn jacobian(&self, x: &[f64], params: &Params) -> Result<Vec<Vec<f64>>, ExprError> {
        let mut jac = vec![vec![0.0; self.dim_in]; self.dim_out()];
        for k in 0..self.dim_in {
            for (i, c) in self.components.iter().enumerate() {
                jac[i][k] = c.eval_dual(x, params, k)?.1;
            }
        }
        Ok(jac)
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &VectorExpr) -> VectorExpr {
        VectorExpr {
            dim_in: inner.dim_in,
            components: self.components.iter().map(|c| c.substitute(&inner.components)).collect(),
        }
    }

    pub fn bind(&self, params: &Params) -> VectorExpr {
        VectorExpr { dim_in: self.dim_in, components: self.components.iter().map(|c| c.bind(params)).collect() }
    }

    pub fn shift_vars(&self, offset: usize, new_dim: usize) -> VectorExpr {
        VectorExpr { dim_in: new_dim, components: self.components.iter().map(|c| c.shift_vars(offset)).collect() }
    }

    pub fn rename_params(&self, map: &BTreeMap<String, String>) -> VectorExpr {
        VectorExpr { dim_in: self.dim_in, components: self.components.iter().map(|c| c.rename_params(map)).collect() }
    }

    pub fn concat(&self, other: &VectorExpr) -> VectorExpr {
        assert_eq!(self.dim_in, other.dim_in);
        let mut components = self.components.clone();
        components.extend(other.components.iter().cloned());
        VectorExpr { dim_in: self.dim_in, components }
    }

    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in &self.components {
            c.collect_params(&mut out);
        }
        out
    }

    pub fn max_var(&self) -> Option<usize> {
        self.components.iter().filter_map(|c| c.max_var()).max()
    }
}

// ---------------------------------------------------------------------------
// evaluation

fn check(op: &'static str, v: f64) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ExprError::NonFinite(op))
    }
}

fn domain(op: &'static str, detail: String) -> ExprError {
    ExprError::Domain { op, detail }
}

fn pow_checked(a: f64, b: f64) -> Result<f64, ExprError> {
    if a < 0.0 && b.fract() != 0.0 {
        return Err(domain("^", format!("negative base {a} with non-integer exponent {b}")));
    }
    if a == 0.0 && b < 0.0 {
        return Err(domain("^", format!("zero base with negative exponent {b}")));
    }
    check("^", a.powf(b))
}

fn apply_func(f: Func, a: &[f64]) -> Result<f64, ExprError> {
    let v = match f {
        Func::Sin => a[0].sin(),
        Func::Cos => a[0].cos(),
        Func::Exp => a[0].exp(),
        Func::Log => {
            if a[0] <= 0.0 {
                return Err(domain("log", format!("argument {} is not positive", a[0])));
            }
            a[0].ln()
        }
        Func::Sqrt => {
            if a[0] < 0.0 {
                return Err(domain("sqrt", format!("argument {} is negative", a[0])));
            }
            a[0].sqrt()
        }
        Func::Abs => a[0].abs(),
        Func::Atan2 => a[0].atan2(a[1]),
        Func::Min => a[0].min(a[1]),
        Func::Max => a[0].max(a[1]),
    };
    check(f.name(), v)
}

impl Expr {
    pub fn eval(&self, x: &[f64], params: &Params) -> Result<f64, ExprError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(i) => x.get(*i).copied().ok_or(ExprError::DimMismatch { index: *i, got: x.len() }),
            Expr::Param(p) => params.get(&**p).copied().ok_or_else(|| ExprError::UnboundParam(p.to_string())),
            Expr::Neg(a) => Ok(-a.eval(x, params)?),
            Expr::Add(a, b) => check("+", a.eval(x, params)? + b.eval(x, params)?),
            Expr::Sub(a, b) => check("-", a.eval(x, params)? - b.eval(x, params)?),
            Expr::Mul(a, b) => check("*", a.eval(x, params)? * b.eval(x, params)?),
            Expr::Div(a, b) => {
                let num = a.eval(x, params)?;
                let den = b.eval(x, params)?;
                if den == 0.0 {
                    return Err(domain("/", "division by zero".into()));
                }
                check("/", num / den)
            }
            Expr::Pow(a, b) => pow_checked(a.eval(x, params)?, b.eval(x, params)?),
            Expr::Call(f, args) => {
                let mut vals = [0.0; 2];
                for (k, a) in args.iter().enumerate() {
                    vals[k] = a.eval(x, params)?;
                }
                apply_func(*f, &vals[..args.len()])
            }
        }
    }

    /// Value and directional derivative along coordinate `dir`.
    pub fn eval_dual(&self, x: &[f64], params: &Params, dir: usize) -> Result<(f64, f64), ExprError> {
        match self {
            Expr::Num(v) => Ok((*v, 0.0)),
            Expr::Var(i) => {
                let v = x.get(*i).copied().ok_or(ExprError::DimMismatch { index: *i, got: x.len() })?;
                Ok((v, if *i == dir { 1.0 } else { 0.0 }))
            }
            Expr::Param(_) => Ok((self.eval(x, params)?, 0.0)),
            Expr::Neg(a) => {
                let (v, d) = a.eval_dual(x, params, dir)?;
                Ok((-v, -d))
            }
            Expr::Add(a, b) => {
                let (av, ad) = a.eval_dual(x, params, dir)?;
                let (bv, bd) = b.eval_dual(x, params, dir)?;
                Ok((check("+", av + bv)?, ad + bd))
            }
            Expr::Sub(a, b) => {
                let (av, ad) = a.eval_dual(x, params, dir)?;
                let (bv, bd) = b.eval_dual(x, params, dir)?;
                Ok((check("-", av - bv)?, ad - bd))
            }
            Expr::Mul(a, b) => {
                let (av, ad) = a.eval_dual(x, params, dir)?;
                let (bv, bd) = b.eval_dual(x, params, dir)?;
                Ok((check("*", av * bv)?, ad * bv + av * bd))
            }
            Expr::Div(a, b) => {
                let (av, ad) = a.eval_dual(x, params, dir)?;
                let (bv, bd) = b.eval_dual(x, params, dir)?;
                if bv == 0.0 {
                    return Err(domain("/", "division by zero".into()));
                }
                Ok((check("/", av / bv)?, (ad * bv - av * bd) / (bv * bv)))
            }
            Expr::Pow(a, b) => {
                let (av, ad) = a.eval_dual(x, params, dir)?;
                let (bv, bd) = b.eval_dual(x, params, dir)?;
                let v = pow_checked(av, bv)?;
                let mut d = 0.0;
                if ad != 0.0 {
                    if av == 0.0 && bv < 1.0 {
                        return Err(ExprError::NonDifferentiable(format!("^ with base 0 and exponent {bv}")));
                    }
                    d += bv * pow_checked(av, bv - 1.0).unwrap_or(0.0) * ad;
                }
                if bd != 0.0 {
                    if av <= 0.0 {
                        return Err(ExprError::NonDifferentiable("^ with varying exponent and non-positive base".into()));
                    }
                    d += v * av.ln() * bd;
                }
                Ok((v, d))
            }
            Expr::Call(f, args) => {
                let (av, ad) = args[0].eval_dual(x, params, dir)?;
                let (bv, bd) = if args.len() > 1 { args[1].eval_dual(x, params, dir)? } else { (0.0, 0.0) };
                let v = apply_func(*f, &[av, bv][..args.len()])?;
                let d = match f {
                    Func::Sin => av.cos() * ad,
                    Func::Cos => -av.sin() * ad,
                    Func::Exp => v * ad,
                    Func::Log => ad / av,
                    Func::Sqrt => {
                        if av == 0.0 {
                            if ad != 0.0 {
                                return Err(ExprError::NonDifferentiable("sqrt at 0".into()));
                            }
                            0.0
                        } else {
                            ad / (2.0 * v)
                        }
                    }
                    Func::Abs => {
                        if av == 0.0 {
                            if ad != 0.0 {
                                return Err(ExprError::NonDifferentiable("abs at 0".into()));
                            }
                            0.0
                        } else {
                            av.signum() * ad
                        }
                    }
                    Func::Atan2 => {
                        let r2 = av * av + bv * bv;
                        if r2 == 0.0 {
                            return Err(ExprError::NonDifferentiable("atan2 at the origin".into()));
                        }
                        (bv * ad - av * bd) / r2
                    }
                    Func::Min | Func::Max => {
                        if av == bv && ad != bd {
                            return Err(ExprError::NonDifferentiable(format!("{} at a tie", f.name())));
                        }
                        let pick_a = if *f == Func::Min { av <= bv } else { av >= bv };
                        if pick_a {
                            ad
                        } else {
                            bd
                        }
                    }
                };
                Ok((v, d))
            }
        }
    }

    /// Gradient with respect to `x` (length `n`).
    pub fn gradient(&self, x: &[f64], params: &Params) -> Result<Vec<f64>, ExprError> {
        (0..x.len()).map(|k| Ok(self.eval_dual(x, params, k)?.1)).collect()
    }

    /// Replace every `x_i` by `vars[i]`.
    pub fn substitute(&self, vars: &[Expr]) -> Expr {
        self.map_leaves(&mut |e| match e {
            Expr::Var(i) => Some(vars[*i].clone()),
            _ => None,
        })
    }

    /// Replace parameters with their values where bound.
    pub fn bind(&self, params: &Params) -> Expr {
        self.map_leaves(&mut |e| match e {
            Expr::Param(p) => params.get(&**p).map(|v| Expr::Num(*v)),
            _ => None,
        })
    }

    pub fn shift_vars(&self, offset: usize) -> Expr {
        self.map_leaves(&mut |e| match e {
            Expr::Var(i) => Some(Expr::Var(i + offset)),
            _ => None,
        })
    }

    pub fn rename_params(&self, map: &BTreeMap<String, String>) -> Expr {
        self.map_leaves(&mut |e| match e {
            Expr::Param(p) => map.get(&**p).map(|n| Expr::param(n)),
            _ => None,
        })
    }

    fn map_leaves(&self, f: &mut impl FnMut(&Expr) -> Option<Expr>) -> Expr {
        if let Some(r) = f(self) {
            return r;
        }
        match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Param(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.map_leaves(f))),
            Expr::Add(a, b) => Expr::Add(Box::new(a.map_leaves(f)), Box::new(b.map_leaves(f))),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.map_leaves(f)), Box::new(b.map_leaves(f))),
            Expr::Mul(a, b) => Expr::Mul(Box::new(a.map_leaves(f)), Box::new(b.map_leaves(f))),
            Expr::Div(a, b) => Expr::Div(Box::new(a.map_leaves(f)), Box::new(b.map_leaves(f))),
            Expr::Pow(a, b) => Expr::Pow(Box::new(a.map_leaves(f)), Box::new(b.map_leaves(f))),
            Expr::Call(func, args) => Expr::Call(*func, args.iter().map(|a| a.map_leaves(f)).collect()),
        }
    }

    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Param(_) => vec![],
            Expr::Neg(a) => vec![a],
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => vec![a, b],
            Expr::Call(_, args) => args.iter().collect(),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Var(i) => Some(*i),
            _ => self.children().into_iter().filter_map(|c| c.max_var()).max(),
        }
    }

    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut BTreeSet<String>) {
        if let Expr::Param(p) = self {
            out.insert(p.to_string());
        }
        for c in self.children() {
            c.collect_params(out);
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().into_iter().map(|c| c.node_count()).sum::<usize>()
    }

    /// Symbolic partial derivative with respect to `x_var`, with constant
    /// folding of zeros and ones. `abs`, `min` and `max` are rejected.
    pub fn diff(&self, var: usize) -> Result<Expr, ExprError> {
        Ok(match self {
            Expr::Num(_) | Expr::Param(_) => Expr::Num(0.0),
            Expr::Var(i) => Expr::Num(if *i == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => s_neg(a.diff(var)?),
            Expr::Add(a, b) => s_add(a.diff(var)?, b.diff(var)?),
            Expr::Sub(a, b) => s_sub(a.diff(var)?, b.diff(var)?),
            Expr::Mul(a, b) => s_add(s_mul(a.diff(var)?, (**b).clone()), s_mul((**a).clone(), b.diff(var)?)),
            Expr::Div(a, b) => {
                let num = s_sub(s_mul(a.diff(var)?, (**b).clone()), s_mul((**a).clone(), b.diff(var)?));
                if num == Expr::Num(0.0) {
                    num
                } else {
                    Expr::div(num, Expr::pow((**b).clone(), Expr::Num(2.0)))
                }
            }
            Expr::Pow(a, b) => {
                let da = a.diff(var)?;
                let db = b.diff(var)?;
                let mut out = Expr::Num(0.0);
                if da != Expr::Num(0.0) {
                    let lowered = match &**b {
                        Expr::Num(n) => Expr::Num(n - 1.0),
                        other => Expr::sub(other.clone(), Expr::Num(1.0)),
                    };
                    let pow = if lowered == Expr::Num(1.0) { (**a).clone() } else { Expr::pow((**a).clone(), lowered) };
                    out = s_mul(s_mul((**b).clone(), pow), da);
                }
                if db != Expr::Num(0.0) {
                    let log = Expr::call(Func::Log, vec![(**a).clone()]);
                    out = s_add(out, s_mul(s_mul(self.clone(), log), db));
                }
                out
            }
            Expr::Call(f, args) => {
                let a = &args[0];
                let da = a.diff(var)?;
                match f {
                    Func::Sin => s_mul(Expr::call(Func::Cos, vec![a.clone()]), da),
                    Func::Cos => s_neg(s_mul(Expr::call(Func::Sin, vec![a.clone()]), da)),
                    Func::Exp => s_mul(self.clone(), da),
                    Func::Log => s_div(da, a.clone()),
                    Func::Sqrt => s_div(da, Expr::mul(Expr::Num(2.0), self.clone())),
                    Func::Atan2 => {
                        let b = &args[1];
                        let db = b.diff(var)?;
                        let r2 = Expr::add(
                            Expr::pow(a.clone(), Expr::Num(2.0)),
                            Expr::pow(b.clone(), Expr::Num(2.0)),
                        );
                        s_div(s_sub(s_mul(b.clone(), da), s_mul(a.clone(), db)), r2)
                    }
                    Func::Abs | Func::Min | Func::Max => {
                        return Err(ExprError::NonDifferentiable(format!("no symbolic derivative for {}", f.name())))
                    }
                }
            }
        })
    }

    /// Derivative along a vector field: `Σ_i ∂_i self · field_i`.
    pub fn lie_derivative(&self, field: &VectorExpr) -> Result<Expr, ExprError> {
        let mut out = Expr::Num(0.0);
        for (i, c) in field.components.iter().enumerate() {
            out = s_add(out, s_mul(self.diff(i)?, c.clone()));
        }
        Ok(out)
    }
}

fn is_num(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Num(n) if *n == v)
}

fn s_neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::neg(other),
    }
}

fn s_add(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) {
        b
    } else if is_num(&b, 0.0) {
        a
    } else {
        Expr::add(a, b)
    }
}

fn s_sub(a: Expr, b: Expr) -> Expr {
    if is_num(&b, 0.0) {
        a
    } else if is_num(&a, 0.0) {
        s_neg(b)
    } else {
        Expr::sub(a, b)
    }
}

fn s_mul(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) || is_num(&b, 0.0) {
        Expr::Num(0.0)
    } else if is_num(&a, 1.0) {
        b
    } else if is_num(&b, 1.0) {
        a
    } else {
        Expr::mul(a, b)
    }
}

fn s_div(a: Expr, b: Expr) -> Expr {
    if is_num(&a, 0.0) {
        Expr::Num(0.0)
    } else if is_num(&b, 1.0) {
        a
    } else {
        Expr::div(a, b)
    }
}

impl Predicate {
    /// Exact semantics: inequalities compared exactly, `==` within `eq_tol`.
    pub fn holds(&self, x: &[f64], params: &Params, eq_tol: f64) -> Result<bool, ExprError> {
        Ok(match self {
            Predicate::True => true,
            Predicate::False => false,
            Predicate::Cmp(a, r, b) => {
                let (av, bv) = (a.eval(x, params)?, b.eval(x, params)?);
                match r {
                    Rel::Lt => av < bv,
                    Rel::Le => av <= bv,
                    Rel::Eq => (av - bv).abs() <= eq_tol,
                    Rel::Ge => av >= bv,
                    Rel::Gt => av > bv,
                }
            }
            Predicate::And(ps) => {
                for p in ps {
                    if !p.holds(x, params, eq_tol)? {
                        return Ok(false);
                    }
                }
                true
            }
            Predicate::Or(ps) => {
                for p in ps {
                    if p.holds(x, params, eq_tol)? {
                        return Ok(true);
                    }
                }
                false
            }
            Predicate::Not(p) => !p.holds(x, params, eq_tol)?,
        })
    }

    /// Membership test that treats evaluation errors as "not a member".
    pub fn contains(&self, x: &[f64], params: &Params, eq_tol: f64) -> bool {
        self.holds(x, params, eq_tol).unwrap_or(false)
    }

    /// Signed robustness: non-negative exactly when the predicate holds
    /// (with `==` read as exact equality).
    pub fn robustness(&self, x: &[f64], params: &Params) -> Result<f64, ExprError> {
        Ok(match self {
            Predicate::True => f64::INFINITY,
            Predicate::False => f64::NEG_INFINITY,
            Predicate::Cmp(a, r, b) => {
                let (av, bv) = (a.eval(x, params)?, b.eval(x, params)?);
                match r {
                    Rel::Lt | Rel::Le => bv - av,
                    Rel::Gt | Rel::Ge => av - bv,
                    Rel::Eq => -(av - bv).abs(),
                }
            }
            Predicate::And(ps) => {
                let mut m = f64::INFINITY;
                for p in ps {
                    m = m.min(p.robustness(x, params)?);
                }
                m
            }
            Predicate::Or(ps) => {
                let mut m = f64::NEG_INFINITY;
                for p in ps {
                    m = m.max(p.robustness(x, params)?);
                }
                m
            }
            Predicate::Not(p) => -p.robustness(x, params)?,
        })
    }

    /// Relaxed membership: every atom may be violated by at most `tol`.
    pub fn holds_within(&self, x: &[f64], params: &Params, tol: f64) -> bool {
        matches!(self.robustness(x, params), Ok(r) if r >= -tol)
    }

    fn map_exprs(&self, f: &mut impl FnMut(&Expr) -> Expr) -> Predicate {
        match self {
            Predicate::True => Predicate::True,
            Predicate::False => Predicate::False,
            Predicate::Cmp(a, r, b) => Predicate::Cmp(f(a), *r, f(b)),
            Predicate::And(ps) => Predicate::And(ps.iter().map(|p| p.map_exprs(f)).collect()),
            Predicate::Or(ps) => Predicate::Or(ps.iter().map(|p| p.map_exprs(f)).collect()),
            Predicate::Not(p) => Predicate::Not(Box::new(p.map_exprs(f))),
        }
    }

    pub fn substitute(&self, vars: &[Expr]) -> Predicate {
        self.map_exprs(&mut |e| e.substitute(vars))
    }

    pub fn bind(&self, params: &Params) -> Predicate {
        self.map_exprs(&mut |e| e.bind(params))
    }

    pub fn shift_vars(&self, offset: usize) -> Predicate {
        self.map_exprs(&mut |e| e.shift_vars(offset))
    }

    pub fn rename_params(&self, map: &BTreeMap<String, String>) -> Predicate {
        self.map_exprs(&mut |e| e.rename_params(map))
    }

    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit_exprs(&mut |e| e.collect_params(&mut out));
        out
    }

    pub fn max_var(&self) -> Option<usize> {
        let mut m: Option<usize> = None;
        self.visit_exprs(&mut |e| m = m.max(e.max_var()));
        m
    }

    fn visit_exprs(&self, f: &mut impl FnMut(&Expr)) {
        match self {
            Predicate::True | Predicate::False => {}
            Predicate::Cmp(a, _, b) => {
                f(a);
                f(b);
            }
            Predicate::And(ps) | Predicate::Or(ps) => ps.iter().for_each(|p| p.visit_exprs(f)),
            Predicate::Not(p) => p.visit_exprs(f),
        }
    }

    /// `lhs - rhs` of every `==` atom reachable through top-level conjunctions.
    pub fn equality_constraints(&self) -> Vec<Expr> {
        let mut out = Vec::new();
        self.collect_equalities(&mut out);
        out
    }

    fn collect_equalities(&self, out: &mut Vec<Expr>) {
        match self {
            Predicate::Cmp(a, Rel::Eq, b) => out.push(Expr::sub(a.clone(), b.clone())),
            Predicate::And(ps) => ps.iter().for_each(|p| p.collect_equalities(out)),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p0() -> Params {
        Params::new()
    }

    #[test]
    fn parses_variables_and_params() {
        assert_eq!(parse_expr("x1", 2).unwrap(), Expr::Var(1));
        assert_eq!(parse_expr("k", 2).unwrap(), Expr::param("k"));
        assert_eq!(parse_expr("x2", 2).unwrap_err(), ExprError::DimOverflow { index: 2, dim: 2 });
        assert!(matches!(parse_expr("foo(x0)", 1), Err(ExprError::UnknownFunction { .. })));
        assert!(matches!(parse_expr("x0 +", 1), Err(ExprError::Syntax { line: 1, col: 5, .. })));
        assert!(matches!(parse_expr("x0 +\n  * 2", 1), Err(ExprError::Syntax { line: 2, col: 3, .. })));
    }

    #[test]
    fn rocking_block_field_ast() {
        let e = parse_expr("-(1/a)*sin(a*(1-x0))", 2).unwrap();
        let expected = Expr::mul(
            Expr::neg(Expr::div(Expr::Num(1.0), Expr::param("a"))),
            Expr::call(Func::Sin, vec![Expr::mul(Expr::param("a"), Expr::sub(Expr::Num(1.0), Expr::Var(0)))]),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn unary_minus_and_powers() {
        assert_eq!(parse_expr("-3", 1).unwrap(), Expr::Num(-3.0));
        assert_eq!(parse_expr("-x0^2", 1).unwrap(), Expr::pow(Expr::neg(Expr::Var(0)), Expr::Num(2.0)));
        assert!(parse_expr("x0^2^3", 1).is_err());
        let e = parse_expr("2^-x0", 1).unwrap();
        assert_eq!(e.eval(&[1.0], &p0()).unwrap(), 0.5);
    }

    #[test]
    fn printer_round_trips() {
        for s in [
            "-(1/a)*sin(a*(1-x0))",
            "k*x1/sqrt(x0^2+x1^2)",
            "x0-(x1-x2)",
            "x0/(x1*x2)",
            "-(3)",
            "-3+x0",
            "x0*-3",
            "(-x0)^2",
            "(x0^2)^x1",
            "-(-x0)",
            "atan2(x0,x1)-min(x0,2)",
            "1e-9*x0",
            "1.5e300",
        ] {
            let a = parse_expr(s, 3).unwrap();
            let b = parse_expr(&a.to_string(), 3).unwrap();
            assert_eq!(a, b, "{s} printed as {a}");
        }
    }

    #[test]
    fn predicate_parsing_and_printing() {
        let p = parse_predicate("x0 <= 0 and x1 >= 0", 2).unwrap();
        assert!(p.holds(&[0.0, 1.0], &p0(), 0.0).unwrap());
        let p = parse_predicate("(x0+1) < 2 or not (x0 > 0 and x1 > 0)", 2).unwrap();
        assert!(matches!(p, Predicate::Or(ref v) if v.len() == 2));
        let q = parse_predicate(&p.to_string(), 2).unwrap();
        assert_eq!(p, q);
        let nested = parse_predicate("(x0 < 1 and x0 > 0) and x1 == 0", 2).unwrap();
        assert_eq!(parse_predicate(&nested.to_string(), 2).unwrap(), nested);
    }

    #[test]
    fn guard_tolerance_semantics() {
        let g = parse_predicate("x0 == 0 and x1 >= 0", 2).unwrap();
        assert!(g.holds(&[1e-12, 0.5], &p0(), 1e-9).unwrap());
        assert!(!g.holds(&[1e-6, 0.5], &p0(), 1e-9).unwrap());
    }

    #[test]
    fn rocking_block_active_set_membership() {
        let p = parse_predicate("0 <= x0 and x0 <= 1 and cos(a*(1-x0)) + (a*x1)^2/2 <= 1", 2).unwrap();
        let params: Params = [("a".to_string(), 0.3)].into();
        assert!(p.holds(&[0.5, 0.0], &params, 1e-9).unwrap());
        // direct substitution
        assert!((0.3f64 * 0.5).cos() <= 1.0);
    }

    #[test]
    fn eval_and_domain_errors() {
        let e = parse_expr("x0+x1", 2).unwrap();
        assert_eq!(e.eval(&[2.0, 3.0], &p0()).unwrap(), 5.0);
        assert!(matches!(parse_expr("log(x0)", 1).unwrap().eval(&[0.0], &p0()), Err(ExprError::Domain { .. })));
        assert!(matches!(parse_expr("x0^0.5", 1).unwrap().eval(&[-1.0], &p0()), Err(ExprError::Domain { .. })));
        assert_eq!(parse_expr("x0^3", 1).unwrap().eval(&[-2.0], &p0()).unwrap(), -8.0);
        assert!(matches!(parse_expr("k", 1).unwrap().eval(&[0.0], &p0()), Err(ExprError::UnboundParam(_))));
        assert!(matches!(parse_expr("1/x0", 1).unwrap().eval(&[0.0], &p0()), Err(ExprError::Domain { .. })));
    }

    #[test]
    fn hand_jacobians() {
        let v = parse_vector(&["x0^2", "x0*x1"], 2).unwrap();
        let j = v.jacobian(&[1.0, 2.0], &p0()).unwrap();
        assert_eq!(j, vec![vec![2.0, 0.0], vec![2.0, 1.0]]);
        let id = VectorExpr::identity(3);
        let j = id.jacobian(&[0.3, -1.0, 2.0], &p0()).unwrap();
        for (i, row) in j.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == k { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn abs_at_zero_is_flagged() {
        let e = parse_expr("abs(x0)", 1).unwrap();
        assert!(matches!(e.eval_dual(&[0.0], &p0(), 0), Err(ExprError::NonDifferentiable(_))));
        assert_eq!(e.eval_dual(&[-2.0], &p0(), 0).unwrap(), (2.0, -1.0));
    }

    #[test]
    fn hopper_radial_derivative_vanishes_on_limit_circle() {
        // x·ẋ for the hopper field at ‖x‖ = k/(2βω²)
        let (k, b, w) = (2.0, 0.5, 1.0);
        let params: Params = [("k".into(), k), ("b".into(), b), ("w".into(), w)].into();
        let field = parse_vector(&["w*x1", "k*x1/(w*sqrt(x0^2+x1^2)) - w*x0 - 2*b*w*x1"], 2).unwrap();
        let r = k / (2.0 * b * w * w);
        for theta in [2.0f64, 2.5, 3.0, 4.0] {
            let x = [r * theta.cos(), r * theta.sin()];
            let f = field.eval(&x, &params).unwrap();
            let radial = x[0] * f[0] + x[1] * f[1];
            assert!(radial.abs() < 1e-12, "{radial}");
        }
    }

    #[test]
    fn substitution_and_binding() {
        let e = parse_expr("x0*k+x1", 2).unwrap();
        let s = e.substitute(&[Expr::Var(1), Expr::Num(2.0)]);
        let params: Params = [("k".into(), 3.0)].into();
        assert_eq!(s.eval(&[0.0, 5.0], &params).unwrap(), 17.0);
        assert_eq!(e.bind(&params).params().len(), 0);
        assert_eq!(e.shift_vars(2).max_var(), Some(3));
    }

    #[test]
    fn robustness_matches_exact_semantics_off_boundary() {
        let p = parse_predicate("x0 < 1 and (x1 > 0 or not x0 >= -1)", 2).unwrap();
        for x in [[0.0, 1.0], [2.0, 1.0], [0.0, -1.0], [-2.0, -1.0]] {
            let exact = p.holds(&x, &p0(), 0.0).unwrap();
            let rob = p.robustness(&x, &p0()).unwrap();
            assert_eq!(exact, rob > 0.0, "{x:?}");
        }
    }

    #[test]
    fn equality_constraints_collects_top_level_eq() {
        let p = parse_predicate("x0^2+x1^2 == 1 and x1 >= 0 and (x0 == 0 or x1 == 0)", 2).unwrap();
        assert_eq!(p.equality_constraints().len(), 1);
    }

    #[test]
    fn pi_constant() {
        assert_eq!(parse_expr("pi", 0).unwrap(), Expr::Num(std::f64::consts::PI));
    }
}
