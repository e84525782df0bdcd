//! Closed-form scalar expressions in the state variables `x1 … xn`.
//!
//! Vector fields are declared as one expression per component. Expressions
//! evaluate on any [`Scalar`], so the same definition feeds the fast `f64`
//! integrators and the hyper-dual bracket machinery. Symbolic partial
//! derivatives back the Jacobians used by the flow solver.

use std::fmt;

use crate::error::{Error, Result};
use crate::jet::Scalar;

const MODULE: &str = "fields";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Zero-based state index.
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    /// Power with a constant real exponent.
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(z), e) | (e, Expr::Const(z)) if z == 0.0 => e,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (e, Expr::Const(z)) if z == 0.0 => e,
        (Expr::Const(z), e) if z == 0.0 => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), e) | (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(z), _) if z == 0.0 => Expr::Const(0.0),
        (e, Expr::Const(o)) if o == 1.0 => e,
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x / y),
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(x) => Expr::Const(-x),
        Expr::Neg(e) => *e,
        e => Expr::Neg(Box::new(e)),
    }
}

fn pow(a: Expr, p: f64) -> Expr {
    match a {
        _ if p == 0.0 => Expr::Const(1.0),
        e if p == 1.0 => e,
        Expr::Const(x) => Expr::Const(x.powf(p)),
        e => Expr::Pow(Box::new(e), p),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Const(x) => Expr::Const(f.eval(&x)),
        e => Expr::Call(f, Box::new(e)),
    }
}

impl Func {
    fn eval<S: Scalar>(self, x: &S) -> S {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Ln => x.ln(),
            Func::Sqrt => x.sqrt(),
            Func::Tanh => x.tanh(),
        }
    }
}

impl Expr {
    /// Parse an expression over `n_vars` state variables named `x1 … xn`.
    pub fn parse(src: &str, n_vars: usize) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, n_vars };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::parse(MODULE, format!("trailing input in '{src}'")));
        }
        Ok(e)
    }

    pub fn eval<S: Scalar>(&self, x: &[S]) -> S {
        match self {
            Expr::Const(c) => S::cst(*c),
            Expr::Var(i) => x[*i].clone(),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Neg(a) => -a.eval(x),
            Expr::Pow(a, p) => a.eval(x).powf(*p),
            Expr::Call(f, a) => f.eval(&a.eval(x)),
        }
    }

    /// Symbolic partial derivative with respect to state variable `var`.
    pub fn diff(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => add(
                mul(a.diff(var), (**b).clone()),
                mul((**a).clone(), b.diff(var)),
            ),
            Expr::Div(a, b) => {
                let num = sub(
                    mul(a.diff(var), (**b).clone()),
                    mul((**a).clone(), b.diff(var)),
                );
                div(num, pow((**b).clone(), 2.0))
            }
            Expr::Neg(a) => neg(a.diff(var)),
            Expr::Pow(a, p) => mul(
                mul(Expr::Const(*p), pow((**a).clone(), p - 1.0)),
                a.diff(var),
            ),
            Expr::Call(f, a) => {
                let inner = a.diff(var);
                if inner == Expr::Const(0.0) {
                    return Expr::Const(0.0);
                }
                let u = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, u),
                    Func::Cos => neg(call(Func::Sin, u)),
                    Func::Exp => call(Func::Exp, u),
                    Func::Ln => div(Expr::Const(1.0), u),
                    Func::Sqrt => div(Expr::Const(0.5), call(Func::Sqrt, u)),
                    Func::Tanh => sub(Expr::Const(1.0), pow(call(Func::Tanh, u), 2.0)),
                };
                mul(outer, inner)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => 1 + a.size() + b.size(),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => 1 + a.size(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Pow(a, p) => write!(f, "({a} ^ {p})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let save = i;
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse()
                .map_err(|_| Error::parse(MODULE, format!("bad number '{text}'")))?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else {
            return Err(Error::parse(MODULE, format!("unexpected character '{c}' in '{src}'")));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    n_vars: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Token::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat('-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat('/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(neg(self.unary()?));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.eat('^') {
            let exponent = self.unary()?;
            return Ok(match exponent {
                Expr::Const(p) => pow(base, p),
                e => call(Func::Exp, mul(e, call(Func::Ln, base))),
            });
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let tok = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| Error::parse(MODULE, "unexpected end of expression"))?;
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Expr::Const(v)),
            Token::Op('(') => {
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(Error::parse(MODULE, "missing ')'"));
                }
                Ok(e)
            }
            Token::Ident(name) => {
                if name == "pi" {
                    return Ok(Expr::Const(std::f64::consts::PI));
                }
                if let Some(f) = Func::from_name(&name) {
                    if !self.eat('(') {
                        return Err(Error::parse(MODULE, format!("'{name}' needs an argument")));
                    }
                    let arg = self.expr()?;
                    if !self.eat(')') {
                        return Err(Error::parse(MODULE, "missing ')'"));
                    }
                    return Ok(call(f, arg));
                }
                if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                    if idx >= 1 && idx <= self.n_vars {
                        return Ok(Expr::Var(idx - 1));
                    }
                    return Err(Error::parse(
                        MODULE,
                        format!("variable '{name}' out of range 1..={}", self.n_vars),
                    ));
                }
                Err(Error::parse(MODULE, format!("unknown identifier '{name}'")))
            }
            Token::Op(c) => Err(Error::parse(MODULE, format!("unexpected '{c}'"))),
        }
    }
}
