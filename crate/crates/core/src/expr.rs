//! A small arithmetic expression language for drivers, terminal conditions
//! and Hurst functions supplied through configuration files.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := ('-' | '+') unary | power
//! power := atom ('^' unary)?            right associative, binds tighter than unary minus
//! atom  := number | var | func '(' expr ')' | 'max' '(' expr ',' expr ')' | '(' expr ')'
//! var   := 't' | 'x' | 'y' | 'z'
//! func  := 'exp' | 'cos' | 'sin' | 'sqrt' | 'abs'
//! ```
//!
//! `-x^2` parses as `-(x^2)`. Numbers accept an optional fraction and exponent
//! (`1`, `0.5`, `2.5e-3`).

use std::fmt;

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("expression error at column {column}: {message} in `{source_text}`")]
pub struct ExprError {
    pub column: usize,
    pub message: String,
    pub source_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Exp,
    Cos,
    Sin,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
    Max(Box<Node>, Box<Node>),
}

/// Variable bindings for evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vars<T> {
    pub t: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Copy> Vars<T> {
    pub fn new(t: T, x: T, y: T, z: T) -> Self {
        Self { t, x, y, z }
    }

    fn get(&self, v: Var) -> T {
        match v {
            Var::T => self.t,
            Var::X => self.x,
            Var::Y => self.y,
            Var::Z => self.z,
        }
    }
}

/// A parsed expression. Keeps its source text for diagnostics and hashing.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    source: String,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let mut p = Parser {
            src,
            bytes: src.as_bytes(),
            pos: 0,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Self {
            root,
            source: src.trim().to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Whitespace-free form of the source, used as a canonical spelling.
    pub fn canonical(&self) -> String {
        self.source.chars().filter(|c| !c.is_whitespace()).collect()
    }

    /// True if the expression mentions `v`.
    pub fn uses(&self, v: Var) -> bool {
        fn walk(n: &Node, v: Var) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(w) => *w == v,
                Node::Neg(a) | Node::Call(_, a) => walk(a, v),
                Node::Add(a, b)
                | Node::Sub(a, b)
                | Node::Mul(a, b)
                | Node::Div(a, b)
                | Node::Pow(a, b)
                | Node::Max(a, b) => walk(a, v) || walk(b, v),
            }
        }
        walk(&self.root, v)
    }

    pub fn eval<T: Real>(&self, vars: &Vars<T>) -> T {
        eval(&self.root, vars)
    }

    /// Value and partial derivative with respect to `wrt` (forward mode).
    pub fn eval_diff<T: Real>(&self, vars: &Vars<T>, wrt: Var) -> (T, T) {
        diff(&self.root, vars, wrt)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn eval<T: Real>(n: &Node, v: &Vars<T>) -> T {
    match n {
        Node::Num(c) => T::lit(*c),
        Node::Var(w) => v.get(*w),
        Node::Neg(a) => -eval(a, v),
        Node::Add(a, b) => eval(a, v) + eval(b, v),
        Node::Sub(a, b) => eval(a, v) - eval(b, v),
        Node::Mul(a, b) => eval(a, v) * eval(b, v),
        Node::Div(a, b) => eval(a, v) / eval(b, v),
        Node::Pow(a, b) => pow(eval(a, v), eval(b, v)),
        Node::Call(f, a) => {
            let x = eval(a, v);
            match f {
                Func::Exp => x.exp(),
                Func::Cos => x.cos(),
                Func::Sin => x.sin(),
                Func::Sqrt => x.sqrt(),
                Func::Abs => x.abs(),
            }
        }
        Node::Max(a, b) => eval(a, v).max(eval(b, v)),
    }
}

fn pow<T: Real>(a: T, b: T) -> T {
    if b == b.round() && b.abs() < T::lit(1024.0) {
        a.powi(b.to_i32().unwrap_or(0))
    } else {
        a.powf(b)
    }
}

fn diff<T: Real>(n: &Node, v: &Vars<T>, wrt: Var) -> (T, T) {
    let zero = T::zero();
    match n {
        Node::Num(c) => (T::lit(*c), zero),
        Node::Var(w) => (v.get(*w), if *w == wrt { T::one() } else { zero }),
        Node::Neg(a) => {
            let (x, dx) = diff(a, v, wrt);
            (-x, -dx)
        }
        Node::Add(a, b) => {
            let ((x, dx), (y, dy)) = (diff(a, v, wrt), diff(b, v, wrt));
            (x + y, dx + dy)
        }
        Node::Sub(a, b) => {
            let ((x, dx), (y, dy)) = (diff(a, v, wrt), diff(b, v, wrt));
            (x - y, dx - dy)
        }
        Node::Mul(a, b) => {
            let ((x, dx), (y, dy)) = (diff(a, v, wrt), diff(b, v, wrt));
            (x * y, dx * y + x * dy)
        }
        Node::Div(a, b) => {
            let ((x, dx), (y, dy)) = (diff(a, v, wrt), diff(b, v, wrt));
            (x / y, (dx * y - x * dy) / (y * y))
        }
        Node::Pow(a, b) => {
            let ((x, dx), (e, de)) = (diff(a, v, wrt), diff(b, v, wrt));
            let val = pow(x, e);
            let d = if de == zero {
                if dx == zero {
                    zero
                } else {
                    e * pow(x, e - T::one()) * dx
                }
            } else {
                val * (de * x.ln() + e * dx / x)
            };
            (val, d)
        }
        Node::Call(f, a) => {
            let (x, dx) = diff(a, v, wrt);
            match f {
                Func::Exp => {
                    let e = x.exp();
                    (e, e * dx)
                }
                Func::Cos => (x.cos(), -x.sin() * dx),
                Func::Sin => (x.sin(), x.cos() * dx),
                Func::Sqrt => {
                    let s = x.sqrt();
                    (s, dx / (T::lit(2.0) * s))
                }
                Func::Abs => {
                    let sign = if x > zero {
                        T::one()
                    } else if x < zero {
                        -T::one()
                    } else {
                        zero
                    };
                    (x.abs(), sign * dx)
                }
            }
        }
        Node::Max(a, b) => {
            let ((x, dx), (y, dy)) = (diff(a, v, wrt), diff(b, v, wrt));
            if x >= y {
                (x, dx)
            } else {
                (y, dy)
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> ExprError {
        ExprError {
            column: self.pos + 1,
            message: msg.to_string(),
            source_text: self.src.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat(b'-') {
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            Ok(Node::Pow(Box::new(base), Box::new(self.unary()?)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        let b = self.bytes;
        while self.pos < b.len() && (b[self.pos].is_ascii_digit() || b[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < b.len() && (b[self.pos] == b'e' || b[self.pos] == b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < b.len() && (b[self.pos] == b'+' || b[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < b.len() && b[self.pos].is_ascii_digit() {
                while self.pos < b.len() && b[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = mark;
            }
        }
        let text = &self.src[start..self.pos];
        text.parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error("malformed number")
        })
    }

    fn ident(&mut self) -> Result<Node, ExprError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        let var = match name {
            "t" => Some(Var::T),
            "x" => Some(Var::X),
            "y" => Some(Var::Y),
            "z" => Some(Var::Z),
            _ => None,
        };
        if let Some(v) = var {
            return Ok(Node::Var(v));
        }
        let func = match name {
            "exp" => Some(Func::Exp),
            "cos" => Some(Func::Cos),
            "sin" => Some(Func::Sin),
            "sqrt" => Some(Func::Sqrt),
            "abs" => Some(Func::Abs),
            "max" => None,
            _ => {
                self.pos = start;
                return Err(self.error(&format!("unknown identifier `{name}`")));
            }
        };
        self.expect(b'(')?;
        let a = self.expr()?;
        let node = match func {
            Some(f) => Node::Call(f, Box::new(a)),
            None => {
                self.expect(b',')?;
                let b = self.expr()?;
                Node::Max(Box::new(a), Box::new(b))
            }
        };
        self.expect(b')')?;
        Ok(node)
    }
}
