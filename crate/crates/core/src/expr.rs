//! Arithmetic and boolean expression language used for flows, guards,
//! resets, invariants and unsafe predicates.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr  := or
//! or    := and ("or" and)*
//! and   := cmp ("and" cmp)*
//! cmp   := add (("<" | "<=" | ">" | ">=" | "==" | "!=") add)?
//! add   := mul (("+" | "-") mul)*
//! mul   := unary (("*" | "/") unary)*
//! unary := "-" unary | "not" unary | pow
//! pow   := atom ("^" unary)?
//! atom  := number | ident | func "(" args ")" | "(" expr ")"
//! ```
//!
//! `^` binds tighter than unary minus, so `-2^2` is `-4`. Comparisons and
//! boolean operators yield `1.0` / `0.0`, which lets guards and flows share
//! one evaluator. `if(c, a, b)` evaluates only the taken branch.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Sqrt,
    Abs,
    Sign,
    Min,
    Max,
    If,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            "min" => Func::Min,
            "max" => Func::Max,
            "if" => Func::If,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
            Func::Min => "min",
            Func::Max => "max",
            Func::If => "if",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::If => 3,
            _ => 1,
        }
    }
}

/// Expression tree. Variable references carry both their name (for
/// printing) and the environment slot they were resolved to.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var { name: Arc<str>, slot: usize },
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at {pos}")]
    UnknownIdent { name: String, pos: usize },
    #[error("function `{func}` at {pos} expects {expected} argument(s), got {got}")]
    Arity {
        func: String,
        expected: usize,
        got: usize,
        pos: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivByZero,
    #[error("square root of negative value {0}")]
    SqrtNegative(f64),
    #[error("non-finite result in `{0}`")]
    NonFinite(String),
    #[error("environment has {got} slots, expression needs slot {need}")]
    MissingSlot { need: usize, got: usize },
}

/// Names visible to the parser: resolvable identifiers (mapped to slots in
/// declaration order) plus optional named definitions that are inlined.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    names: Vec<Arc<str>>,
    index: HashMap<String, usize>,
    defs: HashMap<String, Expr>,
}

impl Scope {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        let mut scope = Scope::default();
        for n in names {
            scope.push(n.as_ref());
        }
        scope
    }

    fn push(&mut self, name: &str) {
        if !self.index.contains_key(name) {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(Arc::from(name));
        }
    }

    /// Registers a named definition that is substituted wherever the name
    /// appears in later expressions.
    pub fn define(&mut self, name: &str, body: Expr) {
        self.defs.insert(name.to_string(), body);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn var(&self, name: &str) -> Option<Expr> {
        self.slot(name).map(|slot| Expr::Var {
            name: self.names[slot].clone(),
            slot,
        })
    }

    pub fn parse(&self, text: &str) -> Result<Expr, ParseError> {
        let tokens = lex(text)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            scope: self,
            text_len: text.len(),
        };
        let e = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(ParseError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected trailing {:?}", tok.kind),
            });
        }
        Ok(e)
    }
}

/// Parses `text`, resolving identifiers against `declared` (slot = index).
pub fn parse_expr<S: AsRef<str>>(text: &str, declared: &[S]) -> Result<Expr, ParseError> {
    Scope::new(declared).parse(text)
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s = &text[start..i];
            let v: f64 = s.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                msg: format!("bad number `{s}`"),
            })?;
            out.push(Token {
                kind: Tok::Num(v),
                pos: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: Tok::Ident(text[start..i].to_string()),
                pos: start,
            });
            continue;
        }
        let two = if i + 1 < bytes.len() {
            &text[i..i + 2]
        } else {
            ""
        };
        let op2 = match two {
            "<=" => Some("<="),
            ">=" => Some(">="),
            "==" => Some("=="),
            "!=" => Some("!="),
            "&&" => Some("and"),
            "||" => Some("or"),
            _ => None,
        };
        if let Some(op) = op2 {
            out.push(Token {
                kind: Tok::Op(op),
                pos: start,
            });
            i += 2;
            continue;
        }
        let kind = match c {
            b'+' => Tok::Op("+"),
            b'-' => Tok::Op("-"),
            b'*' => Tok::Op("*"),
            b'/' => Tok::Op("/"),
            b'^' => Tok::Op("^"),
            b'<' => Tok::Op("<"),
            b'>' => Tok::Op(">"),
            b'=' => Tok::Op("=="),
            b'!' => Tok::Op("not"),
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    pos: start,
                    msg: format!("unexpected character `{ch}`"),
                });
            }
        };
        out.push(Token { kind, pos: start });
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    scope: &'a Scope,
    text_len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn at_op(&self, op: &str) -> bool {
        match self.peek().map(|t| &t.kind) {
            Some(Tok::Op(o)) => *o == op,
            Some(Tok::Ident(w)) => (op == "and" || op == "or" || op == "not") && w == op,
            _ => false,
        }
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.text_len, |t| t.pos)
    }

    fn expect(&mut self, kind: Tok, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t.kind == kind => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(ParseError::Syntax {
                pos: self.here(),
                msg: format!("expected {what}"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        if self.tokens.is_empty() {
            return Err(ParseError::Syntax {
                pos: 0,
                msg: "empty expression".into(),
            });
        }
        self.or()
    }

    fn or(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and()?;
        while self.at_op("or") {
            self.pos += 1;
            let rhs = self.and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.cmp()?;
        while self.at_op("and") {
            self.pos += 1;
            let rhs = self.cmp()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn cmp(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.add()?;
        let op = match self.peek().map(|t| &t.kind) {
            Some(Tok::Op("<")) => CmpOp::Lt,
            Some(Tok::Op("<=")) => CmpOp::Le,
            Some(Tok::Op(">")) => CmpOp::Gt,
            Some(Tok::Op(">=")) => CmpOp::Ge,
            Some(Tok::Op("==")) => CmpOp::Eq,
            Some(Tok::Op("!=")) => CmpOp::Ne,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        let rhs = self.add()?;
        Ok(Expr::Cmp(op, Box::new(lhs), Box::new(rhs)))
    }

    fn add(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.mul()?;
        loop {
            let op = if self.at_op("+") {
                BinOp::Add
            } else if self.at_op("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.mul()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn mul(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.at_op("*") {
                BinOp::Mul
            } else if self.at_op("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.at_op("-") {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.at_op("not") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.pow()
    }

    fn pow(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.at_op("^") {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(ParseError::Syntax {
                pos: self.text_len,
                msg: "unexpected end of input".into(),
            });
        };
        match tok.kind {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Tok::LParen => {
                self.pos += 1;
                let e = self.or()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                if matches!(self.peek().map(|t| &t.kind), Some(Tok::LParen)) {
                    let Some(func) = Func::lookup(&name) else {
                        return Err(ParseError::UnknownIdent {
                            name,
                            pos: tok.pos,
                        });
                    };
                    self.pos += 1;
                    let mut args = Vec::new();
                    if !matches!(self.peek().map(|t| &t.kind), Some(Tok::RParen)) {
                        loop {
                            args.push(self.or()?);
                            if matches!(self.peek().map(|t| &t.kind), Some(Tok::Comma)) {
                                self.pos += 1;
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen, "`)` closing argument list")?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            func: name,
                            expected: func.arity(),
                            got: args.len(),
                            pos: tok.pos,
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if let Some(def) = self.scope.defs.get(&name) {
                    return Ok(def.clone());
                }
                self.scope.var(&name).ok_or(ParseError::UnknownIdent {
                    name,
                    pos: tok.pos,
                })
            }
            other => Err(ParseError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected {other:?}"),
            }),
        }
    }
}

#[inline]
fn truth(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn cmp(op: CmpOp, a: Expr, b: Expr) -> Expr {
        Expr::Cmp(op, Box::new(a), Box::new(b))
    }

    pub fn and(a: Expr, b: Expr) -> Expr {
        Expr::And(Box::new(a), Box::new(b))
    }

    /// Evaluates the expression against a slot-indexed environment.
    pub fn eval(&self, env: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var { slot, .. } => *env.get(*slot).ok_or(EvalError::MissingSlot {
                need: *slot,
                got: env.len(),
            })?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Not(a) => truth(a.eval(env)? == 0.0),
            Expr::Bin(op, a, b) => {
                let x = a.eval(env)?;
                let y = b.eval(env)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(EvalError::DivByZero);
                        }
                        x / y
                    }
                    BinOp::Pow => {
                        if y.fract() == 0.0 && y.abs() <= 64.0 {
                            x.powi(y as i32)
                        } else {
                            x.powf(y)
                        }
                    }
                }
            }
            Expr::Cmp(op, a, b) => {
                let x = a.eval(env)?;
                let y = b.eval(env)?;
                truth(match op {
                    CmpOp::Lt => x < y,
                    CmpOp::Le => x <= y,
                    CmpOp::Gt => x > y,
                    CmpOp::Ge => x >= y,
                    CmpOp::Eq => x == y,
                    CmpOp::Ne => x != y,
                })
            }
            Expr::And(a, b) => {
                let x = a.eval(env)? != 0.0;
                let y = b.eval(env)? != 0.0;
                truth(x && y)
            }
            Expr::Or(a, b) => {
                let x = a.eval(env)? != 0.0;
                let y = b.eval(env)? != 0.0;
                truth(x || y)
            }
            Expr::Call(f, args) => match f {
                Func::If => {
                    if args[0].eval(env)? != 0.0 {
                        args[1].eval(env)?
                    } else {
                        args[2].eval(env)?
                    }
                }
                Func::Min => args[0].eval(env)?.min(args[1].eval(env)?),
                Func::Max => args[0].eval(env)?.max(args[1].eval(env)?),
                Func::Sqrt => {
                    let x = args[0].eval(env)?;
                    if x < 0.0 {
                        return Err(EvalError::SqrtNegative(x));
                    }
                    x.sqrt()
                }
                Func::Sin => args[0].eval(env)?.sin(),
                Func::Cos => args[0].eval(env)?.cos(),
                Func::Tan => args[0].eval(env)?.tan(),
                Func::Exp => args[0].eval(env)?.exp(),
                Func::Abs => args[0].eval(env)?.abs(),
                Func::Sign => {
                    let x = args[0].eval(env)?;
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            },
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite(self.to_string()))
        }
    }

    /// Evaluates as a predicate (nonzero is true).
    pub fn holds(&self, env: &[f64]) -> Result<bool, EvalError> {
        Ok(self.eval(env)? != 0.0)
    }

    /// Every slot referenced anywhere in the tree.
    pub fn slots(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var { slot, .. } = e {
                if !out.contains(slot) {
                    out.push(*slot);
                }
            }
        });
        out
    }

    pub fn references_any(&self, slots: &[usize]) -> bool {
        self.slots().iter().any(|s| slots.contains(s))
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Num(_) | Expr::Var { .. } => {}
            Expr::Neg(a) | Expr::Not(a) => a.visit(f),
            Expr::Bin(_, a, b) | Expr::Cmp(_, a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.visit(f)),
        }
    }

    /// Replaces variable references via `f`; references mapped to `None`
    /// are left in place.
    pub fn substitute(&self, f: &impl Fn(usize) -> Option<Expr>) -> Expr {
        match self {
            Expr::Num(_) => self.clone(),
            Expr::Var { slot, .. } => f(*slot).unwrap_or_else(|| self.clone()),
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(f))),
            Expr::Not(a) => Expr::Not(Box::new(a.substitute(f))),
            Expr::Bin(op, a, b) => Expr::bin(*op, a.substitute(f), b.substitute(f)),
            Expr::Cmp(op, a, b) => Expr::cmp(*op, a.substitute(f), b.substitute(f)),
            Expr::And(a, b) => Expr::and(a.substitute(f), b.substitute(f)),
            Expr::Or(a, b) => Expr::Or(Box::new(a.substitute(f)), Box::new(b.substitute(f))),
            Expr::Call(func, args) => {
                Expr::Call(*func, args.iter().map(|a| a.substitute(f)).collect())
            }
        }
    }

    /// Splits a top-level conjunction into its conjuncts.
    pub fn conjuncts(&self) -> Vec<&Expr> {
        match self {
            Expr::And(a, b) => {
                let mut v = a.conjuncts();
                v.extend(b.conjuncts());
                v
            }
            _ => vec![self],
        }
    }

    /// How far the predicate is from holding: zero when it holds, otherwise
    /// the magnitude of the violated margin. Used to check replayed guards
    /// that are satisfied only up to integration error.
    pub fn violation(&self, env: &[f64]) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Cmp(op, a, b) => {
                let d = a.eval(env)? - b.eval(env)?;
                match op {
                    CmpOp::Lt | CmpOp::Le => d.max(0.0),
                    CmpOp::Gt | CmpOp::Ge => (-d).max(0.0),
                    CmpOp::Eq => d.abs(),
                    CmpOp::Ne => {
                        if d == 0.0 {
                            f64::INFINITY
                        } else {
                            0.0
                        }
                    }
                }
            }
            Expr::And(a, b) => a.violation(env)?.max(b.violation(env)?),
            Expr::Or(a, b) => a.violation(env)?.min(b.violation(env)?),
            _ => {
                if self.holds(env)? {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 1,
            Expr::And(..) => 2,
            Expr::Cmp(..) => 3,
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 4,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 5,
            Expr::Neg(_) | Expr::Not(_) => 6,
            Expr::Bin(BinOp::Pow, ..) => 7,
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 6,
            Expr::Num(_) | Expr::Var { .. } | Expr::Call(..) => 8,
        }
    }

    fn write_prec(&self, out: &mut String, min: u8) {
        let paren = self.precedence() < min;
        if paren {
            out.push('(');
        }
        match self {
            Expr::Num(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    out.push('-');
                    out.push_str(&format!("{}", -v));
                } else {
                    out.push_str(&format!("{v}"));
                }
            }
            Expr::Var { name, .. } => out.push_str(name),
            Expr::Neg(a) => {
                out.push('-');
                a.write_prec(out, 6);
            }
            Expr::Not(a) => {
                out.push_str("not ");
                a.write_prec(out, 6);
            }
            Expr::Bin(op, a, b) => {
                let (sym, l, r) = match op {
                    BinOp::Add => (" + ", 4, 5),
                    BinOp::Sub => (" - ", 4, 5),
                    BinOp::Mul => (" * ", 5, 6),
                    BinOp::Div => (" / ", 5, 6),
                    BinOp::Pow => ("^", 8, 6),
                };
                a.write_prec(out, l);
                out.push_str(sym);
                b.write_prec(out, r);
            }
            Expr::Cmp(op, a, b) => {
                a.write_prec(out, 4);
                out.push(' ');
                out.push_str(op.symbol());
                out.push(' ');
                b.write_prec(out, 4);
            }
            Expr::And(a, b) => {
                a.write_prec(out, 2);
                out.push_str(" and ");
                b.write_prec(out, 3);
            }
            Expr::Or(a, b) => {
                a.write_prec(out, 1);
                out.push_str(" or ");
                b.write_prec(out, 2);
            }
            Expr::Call(f, args) => {
                out.push_str(f.name());
                out.push('(');
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    a.write_prec(out, 1);
                }
                out.push(')');
            }
        }
        if paren {
            out.push(')');
        }
    }
}

/// Renders an expression in the concrete syntax accepted by the parser.
pub fn print_expr(e: &Expr) -> String {
    let mut s = String::new();
    e.write_prec(&mut s, 1);
    s
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_expr(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(text: &str, names: &[&str], env: &[f64]) -> f64 {
        parse_expr(text, names).unwrap().eval(env).unwrap()
    }

    #[test]
    fn precedence() {
        assert_eq!(eval("2+3*4", &[], &[]), 14.0);
        assert_eq!(eval("-2^2", &[], &[]), -4.0);
        assert_eq!(eval("2^3^2", &[], &[]), 512.0);
        assert_eq!(eval("2^-1", &[], &[]), 0.5);
        assert_eq!(eval("1 < 2 and 3 > 4 or 1", &[], &[]), 1.0);
        assert_eq!(eval("10 - 4 - 3", &[], &[]), 3.0);
        assert_eq!(eval("12 / 3 / 2", &[], &[]), 2.0);
    }

    #[test]
    fn neuron_flow() {
        let names = ["v", "u", "I"];
        let e = parse_expr("0.04*v^2 + 5*v + 140 - u + I", &names).unwrap();
        let got = e.eval(&[-65.0, 8.0, 40.0]).unwrap();
        assert!((got - 16.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn builtins() {
        assert_eq!(eval("sin(0)", &[], &[]), 0.0);
        assert_eq!(eval("if(1<2, 3, 4)", &[], &[]), 3.0);
        assert_eq!(eval("min(3, -1) + max(2, 5)", &[], &[]), 4.0);
        assert_eq!(eval("sign(-3) + abs(-2)", &[], &[]), 1.0);
        assert_eq!(eval("not 0", &[], &[]), 1.0);
        assert_eq!(eval("7.5e-7 * 2", &[], &[]), 1.5e-6);
    }

    #[test]
    fn lazy_if() {
        assert_eq!(eval("if(1, 2, 1/0)", &[], &[]), 2.0);
        let e = parse_expr("if(0, 2, 1/0)", &[] as &[&str]).unwrap();
        assert_eq!(e.eval(&[]), Err(EvalError::DivByZero));
    }

    #[test]
    fn domain_errors() {
        let e = parse_expr("sqrt(x)", &["x"]).unwrap();
        assert!(matches!(e.eval(&[-1.0]), Err(EvalError::SqrtNegative(_))));
        let e = parse_expr("exp(x)", &["x"]).unwrap();
        assert!(matches!(e.eval(&[1e6]), Err(EvalError::NonFinite(_))));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_expr("q + 1", &["v"]),
            Err(ParseError::UnknownIdent { .. })
        ));
        assert!(matches!(
            parse_expr("min(1)", &[] as &[&str]),
            Err(ParseError::Arity { expected: 2, got: 1, .. })
        ));
        assert!(matches!(
            parse_expr("1 +", &[] as &[&str]),
            Err(ParseError::Syntax { pos: 3, .. })
        ));
        assert!(parse_expr("", &[] as &[&str]).is_err());
        assert!(parse_expr("(1", &[] as &[&str]).is_err());
        assert!(parse_expr("foo(1)", &[] as &[&str]).is_err());
    }

    #[test]
    fn printing() {
        assert_eq!(print_expr(&Expr::Num(14.0)), "14");
        let names = ["a", "b"];
        let e = parse_expr("min(a, b)+1", &names).unwrap();
        assert_eq!(parse_expr(&print_expr(&e), &names).unwrap(), e);
        let e = parse_expr("-(a - b) ^ 2 * (a + b) / -b", &names).unwrap();
        assert_eq!(parse_expr(&print_expr(&e), &names).unwrap(), e);
    }

    #[test]
    fn pendulum_control_law_round_trips() {
        let names = ["theta", "w"];
        let mut scope = Scope::new(&names);
        scope.define("E", scope.parse("0.5*w + (cos(theta) - 1)").unwrap());
        let text = "if(E >= -1 and E <= 1, if(abs(w) + abs(theta) <= 1.85, \
                    (2*w + theta + sin(theta)) / cos(theta), 0), \
                    if(E < -1, w / (1 + abs(w)) * cos(theta), -w / (1 + abs(w)) * cos(theta)))";
        let e = scope.parse(text).unwrap();
        let printed = print_expr(&e);
        assert_eq!(Scope::new(&names).parse(&printed).unwrap(), e);
    }

    #[test]
    fn violation_margin() {
        let e = parse_expr("v >= 30 and u == 2", &["v", "u"]).unwrap();
        assert_eq!(e.violation(&[31.0, 2.0]).unwrap(), 0.0);
        assert_eq!(e.violation(&[29.5, 2.0]).unwrap(), 0.5);
        assert_eq!(e.violation(&[30.0, 2.25]).unwrap(), 0.25);
    }
}
