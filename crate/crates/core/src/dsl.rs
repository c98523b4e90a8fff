//! Scalar drift expressions.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' ['-'] integer)?
//! atom    := number | 'x'<i> | 't' | 'M'<k> ['_'<j>] | func '(' expr ')' | '(' expr ')'
//! func    := sin | cos | exp | tanh
//! ```
//!
//! `x1..x{d+m}` are the state coordinates (first the `d` noise-free ones).
//! `Mk` is the k-th raw moment of the law of the second component; without a
//! `_j` suffix it refers to the coordinate the expression drives, `Mk_j`
//! names coordinate `j` explicitly. Moment orders are limited to `1..=4`.

use std::fmt;

use thiserror::Error;

use crate::error::{Error, Result};

pub const MAX_MOMENT_ORDER: u32 = 4;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at byte {offset}: expected {expected}, found {found}")]
pub struct ParseError {
    pub offset: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Tanh => v.tanh(),
        }
    }
}

/// Expression tree. Literals are always non-negative; negative constants are
/// `Neg(Num(c))` so that printing and parsing are exact inverses.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Zero-based state coordinate.
    Var(usize),
    Time,
    /// Raw moment of order `order`; `coord` is zero-based, `None` means the
    /// expression's own coordinate.
    Moment { order: u32, coord: Option<usize> },
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

/// Variable with respect to which [`DriftExpr::partial`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    /// Zero-based state coordinate.
    State(usize),
    Time,
    /// Moment symbol of given order and zero-based coordinate.
    Moment { order: u32, coord: usize },
}

/// A parsed expression bound to its state dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftExpr {
    expr: Expr,
    d: usize,
    m: usize,
    own_coord: usize,
}

impl DriftExpr {
    pub fn parse(source: &str, dims: (usize, usize)) -> std::result::Result<Self, ParseError> {
        let expr = Parser::new(source, dims).parse()?;
        Ok(Self {
            expr,
            d: dims.0,
            m: dims.1,
            own_coord: 0,
        })
    }

    pub fn from_expr(expr: Expr, dims: (usize, usize)) -> Self {
        Self {
            expr,
            d: dims.0,
            m: dims.1,
            own_coord: 0,
        }
    }

    pub fn constant(c: f64, dims: (usize, usize)) -> Self {
        Self::from_expr(num(c), dims)
    }

    /// Sets the coordinate that unsuffixed moment symbols refer to.
    pub fn with_own_coord(mut self, coord: usize) -> Self {
        self.own_coord = coord;
        self
    }

    pub fn own_coord(&self) -> usize {
        self.own_coord
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.expr, Expr::Num(v) if v == 0.0)
    }

    pub fn uses_moments(&self) -> bool {
        self.max_moment_order() > 0
    }

    pub fn max_moment_order(&self) -> u32 {
        let mut max = 0;
        visit(&self.expr, &mut |e| {
            if let Expr::Moment { order, .. } = e {
                max = max.max(*order);
            }
        });
        max
    }

    pub fn uses_time(&self) -> bool {
        let mut used = false;
        visit(&self.expr, &mut |e| used |= matches!(e, Expr::Time));
        used
    }

    /// Whether state coordinate `i` (zero-based) appears.
    pub fn uses_var(&self, i: usize) -> bool {
        let mut used = false;
        visit(&self.expr, &mut |e| used |= matches!(e, Expr::Var(v) if *v == i));
        used
    }

    fn resolve(&self, coord: Option<usize>) -> usize {
        coord.unwrap_or(self.own_coord)
    }

    /// Evaluates at time `t`, state `x` (length `d + m`) and flat moment
    /// table `moments[(k - 1) * m + j]`.
    pub fn eval(&self, t: f64, x: &[f64], moments: &[f64]) -> Result<f64> {
        let v = self.eval_node(&self.expr, t, x, moments)?;
        Ok(v)
    }

    fn eval_node(&self, e: &Expr, t: f64, x: &[f64], mo: &[f64]) -> Result<f64> {
        let v = match e {
            Expr::Num(c) => *c,
            Expr::Var(i) => *x.get(*i).ok_or_else(|| Error::input(format!("state vector too short for x{}", i + 1)))?,
            Expr::Time => t,
            Expr::Moment { order, coord } => {
                let idx = (*order as usize - 1) * self.m + self.resolve(*coord);
                *mo.get(idx).ok_or_else(|| {
                    Error::input(format!("moment M{} not provided", order))
                })?
            }
            Expr::Neg(a) => -self.eval_node(a, t, x, mo)?,
            Expr::Add(a, b) => self.eval_node(a, t, x, mo)? + self.eval_node(b, t, x, mo)?,
            Expr::Sub(a, b) => self.eval_node(a, t, x, mo)? - self.eval_node(b, t, x, mo)?,
            Expr::Mul(a, b) => self.eval_node(a, t, x, mo)? * self.eval_node(b, t, x, mo)?,
            Expr::Div(a, b) => {
                let den = self.eval_node(b, t, x, mo)?;
                if den == 0.0 {
                    return Err(Error::Eval {
                        expr: e.to_string(),
                        reason: "division by zero".into(),
                    });
                }
                self.eval_node(a, t, x, mo)? / den
            }
            Expr::Pow(a, k) => {
                let base = self.eval_node(a, t, x, mo)?;
                if base == 0.0 && *k < 0 {
                    return Err(Error::Eval {
                        expr: e.to_string(),
                        reason: "division by zero".into(),
                    });
                }
                base.powi(*k)
            }
            Expr::Call(f, a) => f.apply(self.eval_node(a, t, x, mo)?),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval {
                expr: e.to_string(),
                reason: format!("non-finite value {v}"),
            })
        }
    }

    /// Symbolic partial derivative, simplified.
    pub fn partial(&self, wrt: Wrt) -> DriftExpr {
        let expr = simplify(&self.diff(&self.expr, wrt));
        DriftExpr {
            expr,
            d: self.d,
            m: self.m,
            own_coord: self.own_coord,
        }
    }

    /// Partial with respect to the zero-based state coordinate `i`.
    pub fn partial_state(&self, i: usize) -> DriftExpr {
        self.partial(Wrt::State(i))
    }

    fn diff(&self, e: &Expr, wrt: Wrt) -> Expr {
        match e {
            Expr::Num(_) => num(0.0),
            Expr::Var(i) => num(f64::from(u8::from(wrt == Wrt::State(*i)))),
            Expr::Time => num(f64::from(u8::from(wrt == Wrt::Time))),
            Expr::Moment { order, coord } => {
                let hit = wrt
                    == Wrt::Moment {
                        order: *order,
                        coord: self.resolve(*coord),
                    };
                num(f64::from(u8::from(hit)))
            }
            Expr::Neg(a) => Expr::Neg(Box::new(self.diff(a, wrt))),
            Expr::Add(a, b) => add(self.diff(a, wrt), self.diff(b, wrt)),
            Expr::Sub(a, b) => sub(self.diff(a, wrt), self.diff(b, wrt)),
            Expr::Mul(a, b) => add(
                mul(self.diff(a, wrt), (**b).clone()),
                mul((**a).clone(), self.diff(b, wrt)),
            ),
            Expr::Div(a, b) => Expr::Div(
                Box::new(sub(
                    mul(self.diff(a, wrt), (**b).clone()),
                    mul((**a).clone(), self.diff(b, wrt)),
                )),
                Box::new(Expr::Pow(b.clone(), 2)),
            ),
            Expr::Pow(a, k) => mul(
                mul(num(f64::from(*k)), Expr::Pow(a.clone(), k - 1)),
                self.diff(a, wrt),
            ),
            Expr::Call(f, a) => {
                let inner = self.diff(a, wrt);
                let outer = match f {
                    Func::Sin => Expr::Call(Func::Cos, a.clone()),
                    Func::Cos => Expr::Neg(Box::new(Expr::Call(Func::Sin, a.clone()))),
                    Func::Exp => Expr::Call(Func::Exp, a.clone()),
                    Func::Tanh => sub(num(1.0), Expr::Pow(Box::new(Expr::Call(Func::Tanh, a.clone())), 2)),
                };
                mul(outer, inner)
            }
        }
    }

    pub fn compile(&self) -> Compiled {
        Compiled::new(self)
    }
}

impl fmt::Display for DriftExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}

fn visit(e: &Expr, f: &mut impl FnMut(&Expr)) {
    f(e);
    match e {
        Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => visit(a, f),
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            visit(a, f);
            visit(b, f);
        }
        _ => {}
    }
}

/// Literal constructor that keeps literals non-negative.
pub fn num(c: f64) -> Expr {
    if c < 0.0 {
        Expr::Neg(Box::new(Expr::Num(-c)))
    } else {
        Expr::Num(c)
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    Expr::Add(Box::new(a), Box::new(b))
}

fn sub(a: Expr, b: Expr) -> Expr {
    Expr::Sub(Box::new(a), Box::new(b))
}

fn mul(a: Expr, b: Expr) -> Expr {
    Expr::Mul(Box::new(a), Box::new(b))
}

fn constant_of(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(c) => Some(*c),
        Expr::Neg(a) => match **a {
            Expr::Num(c) => Some(-c),
            _ => None,
        },
        _ => None,
    }
}

/// Bottom-up algebraic clean-up: constant folding and the 0/1 identities.
pub fn simplify(e: &Expr) -> Expr {
    match e {
        Expr::Num(_) | Expr::Var(_) | Expr::Time | Expr::Moment { .. } => e.clone(),
        Expr::Neg(a) => {
            let a = simplify(a);
            match a {
                Expr::Num(c) if c == 0.0 => num(0.0),
                Expr::Neg(inner) => *inner,
                other => Expr::Neg(Box::new(other)),
            }
        }
        Expr::Add(a, b) => {
            let (a, b) = (simplify(a), simplify(b));
            match (constant_of(&a), constant_of(&b)) {
                (Some(x), Some(y)) => num(x + y),
                (Some(x), None) if x == 0.0 => b,
                (None, Some(y)) if y == 0.0 => a,
                _ => add(a, b),
            }
        }
        Expr::Sub(a, b) => {
            let (a, b) = (simplify(a), simplify(b));
            match (constant_of(&a), constant_of(&b)) {
                (Some(x), Some(y)) => num(x - y),
                (Some(x), None) if x == 0.0 => simplify(&Expr::Neg(Box::new(b))),
                (None, Some(y)) if y == 0.0 => a,
                _ => sub(a, b),
            }
        }
        Expr::Mul(a, b) => {
            let (a, b) = (simplify(a), simplify(b));
            match (constant_of(&a), constant_of(&b)) {
                (Some(x), Some(y)) => num(x * y),
                (Some(x), _) | (_, Some(x)) if x == 0.0 => num(0.0),
                (Some(x), None) if x == 1.0 => b,
                (None, Some(y)) if y == 1.0 => a,
                (Some(x), None) if x == -1.0 => simplify(&Expr::Neg(Box::new(b))),
                (None, Some(y)) if y == -1.0 => simplify(&Expr::Neg(Box::new(a))),
                _ => mul(a, b),
            }
        }
        Expr::Div(a, b) => {
            let (a, b) = (simplify(a), simplify(b));
            match (constant_of(&a), constant_of(&b)) {
                (Some(x), Some(y)) if y != 0.0 => num(x / y),
                (Some(x), _) if x == 0.0 => num(0.0),
                (None, Some(y)) if y == 1.0 => a,
                _ => Expr::Div(Box::new(a), Box::new(b)),
            }
        }
        Expr::Pow(a, k) => {
            let a = simplify(a);
            match (*k, constant_of(&a)) {
                (0, _) => num(1.0),
                (1, _) => a,
                (k, Some(c)) if c != 0.0 || k > 0 => num(c.powi(k)),
                (k, _) => Expr::Pow(Box::new(a), k),
            }
        }
        Expr::Call(f, a) => {
            let a = simplify(a);
            match constant_of(&a) {
                Some(c) => num(f.apply(c)),
                None => Expr::Call(*f, Box::new(a)),
            }
        }
    }
}

// Printing -------------------------------------------------------------------

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => PREC_ADD,
        Expr::Mul(..) | Expr::Div(..) => PREC_MUL,
        Expr::Neg(_) => PREC_NEG,
        Expr::Pow(..) => PREC_POW,
        _ => PREC_ATOM,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Time => write!(f, "t"),
            Expr::Moment { order, coord: None } => write!(f, "M{order}"),
            Expr::Moment {
                order,
                coord: Some(j),
            } => write!(f, "M{order}_{}", j + 1),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, prec(a) < PREC_NEG)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let (op, p) = match self {
                    Expr::Add(..) => (" + ", PREC_ADD),
                    Expr::Sub(..) => (" - ", PREC_ADD),
                    Expr::Mul(..) => ("*", PREC_MUL),
                    _ => ("/", PREC_MUL),
                };
                write_child(f, a, prec(a) < p)?;
                write!(f, "{op}")?;
                write_child(f, b, prec(b) <= p)
            }
            Expr::Pow(a, k) => {
                write_child(f, a, prec(a) < PREC_ATOM)?;
                write!(f, "^{k}")
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

// Parsing --------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::End => "end of input".into(),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
    d: usize,
    m: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, dims: (usize, usize)) -> Self {
        Self {
            src,
            pos: 0,
            tok: Tok::End,
            tok_start: 0,
            d: dims.0,
            m: dims.1,
        }
    }

    fn err(&self, expected: impl Into<String>) -> ParseError {
        ParseError {
            offset: self.tok_start,
            expected: expected.into(),
            found: self.tok.describe(),
        }
    }

    fn advance(&mut self) -> std::result::Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Tok::End;
            return Ok(());
        }
        let c = bytes[self.pos];
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                self.pos += 1;
            }
            if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
                let save = self.pos;
                self.pos += 1;
                if self.pos < bytes.len() && (bytes[self.pos] == b'+' || bytes[self.pos] == b'-') {
                    self.pos += 1;
                }
                if self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                } else {
                    self.pos = save;
                }
            }
            let text = &self.src[start..self.pos];
            return match text.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    self.tok = Tok::Num(v);
                    Ok(())
                }
                _ => Err(ParseError {
                    offset: start,
                    expected: "finite number".into(),
                    found: format!("`{text}`"),
                }),
            };
        }
        if c.is_ascii_alphabetic() {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
            self.tok = Tok::Ident(self.src[start..self.pos].to_string());
            return Ok(());
        }
        if b"+-*/^()".contains(&c) {
            self.pos += 1;
            self.tok = Tok::Op(c as char);
            return Ok(());
        }
        let ch = self.src[self.pos..].chars().next().unwrap_or('?');
        Err(ParseError {
            offset: self.pos,
            expected: "expression token".into(),
            found: format!("`{ch}`"),
        })
    }

    fn parse(mut self) -> std::result::Result<Expr, ParseError> {
        self.advance()?;
        let e = self.expr()?;
        if self.tok != Tok::End {
            return Err(self.err("operator or end of input"));
        }
        Ok(e)
    }

    fn expr(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.tok {
                Tok::Op('+') => {
                    self.advance()?;
                    lhs = add(lhs, self.term()?);
                }
                Tok::Op('-') => {
                    self.advance()?;
                    lhs = sub(lhs, self.term()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> std::result::Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.tok {
                Tok::Op('*') => {
                    self.advance()?;
                    lhs = mul(lhs, self.unary()?);
                }
                Tok::Op('/') => {
                    self.advance()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> std::result::Result<Expr, ParseError> {
        if self.tok == Tok::Op('-') {
            self.advance()?;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> std::result::Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.tok != Tok::Op('^') {
            return Ok(base);
        }
        self.advance()?;
        let negative = if self.tok == Tok::Op('-') {
            self.advance()?;
            true
        } else {
            false
        };
        let k = match self.tok {
            Tok::Num(v) if v.fract() == 0.0 && v <= i32::MAX as f64 => v as i32,
            _ => return Err(self.err("integer exponent")),
        };
        let k = if negative { -k } else { k };
        if k < 0 && contains_moment(&base) {
            return Err(self.err("non-negative exponent on a moment symbol"));
        }
        self.advance()?;
        if self.tok == Tok::Op('^') {
            return Err(self.err("parentheses around chained powers"));
        }
        Ok(Expr::Pow(Box::new(base), k))
    }

    fn atom(&mut self) -> std::result::Result<Expr, ParseError> {
        match self.tok.clone() {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Expr::Num(v))
            }
            Tok::Op('(') => {
                self.advance()?;
                let e = self.expr()?;
                if self.tok != Tok::Op(')') {
                    return Err(self.err("`)`"));
                }
                self.advance()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let e = self.ident(&name)?;
                self.advance()?;
                if let Expr::Call(f, _) = e {
                    if self.tok != Tok::Op('(') {
                        return Err(self.err(format!("`(` after {}", f.name())));
                    }
                    self.advance()?;
                    let arg = self.expr()?;
                    if self.tok != Tok::Op(')') {
                        return Err(self.err("`)`"));
                    }
                    self.advance()?;
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                Ok(e)
            }
            _ => Err(self.err("number, variable, function or `(`")),
        }
    }

    /// Resolves an identifier; functions come back as `Call` placeholders.
    fn ident(&self, name: &str) -> std::result::Result<Expr, ParseError> {
        let placeholder = || Box::new(Expr::Num(0.0));
        match name {
            "t" => return Ok(Expr::Time),
            "sin" => return Ok(Expr::Call(Func::Sin, placeholder())),
            "cos" => return Ok(Expr::Call(Func::Cos, placeholder())),
            "exp" => return Ok(Expr::Call(Func::Exp, placeholder())),
            "tanh" => return Ok(Expr::Call(Func::Tanh, placeholder())),
            _ => {}
        }
        let n = self.d + self.m;
        if let Some(rest) = name.strip_prefix('x') {
            if let Ok(i) = rest.parse::<usize>() {
                if (1..=n).contains(&i) && !rest.starts_with('0') {
                    return Ok(Expr::Var(i - 1));
                }
                return Err(self.err(format!("state variable x1..x{n}")));
            }
        }
        if let Some(rest) = name.strip_prefix('M') {
            let (order_txt, coord_txt) = match rest.split_once('_') {
                Some((o, c)) => (o, Some(c)),
                None => (rest, None),
            };
            if let Ok(order) = order_txt.parse::<u32>() {
                if !(1..=MAX_MOMENT_ORDER).contains(&order) {
                    return Err(self.err(format!("moment order 1..{MAX_MOMENT_ORDER}")));
                }
                if self.m == 0 {
                    return Err(self.err("no moment symbols (m = 0)"));
                }
                let coord = match coord_txt {
                    None => None,
                    Some(c) => match c.parse::<usize>() {
                        Ok(j) if (1..=self.m).contains(&j) => Some(j - 1),
                        _ => return Err(self.err(format!("moment coordinate 1..{}", self.m))),
                    },
                };
                return Ok(Expr::Moment { order, coord });
            }
        }
        Err(self.err("variable, moment symbol or function"))
    }
}

fn contains_moment(e: &Expr) -> bool {
    let mut found = false;
    visit(e, &mut |n| found |= matches!(n, Expr::Moment { .. }));
    found
}

// Compiled evaluation ------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(usize),
    Time,
    Moment(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Powi(i32),
    Call(Func),
}

/// Postfix program for hot loops. Non-finite results are reported by
/// re-evaluating the tree, which locates the failing subexpression.
#[derive(Debug, Clone)]
pub struct Compiled {
    ops: Vec<Op>,
    depth: usize,
    source: DriftExpr,
}

impl Compiled {
    fn new(src: &DriftExpr) -> Self {
        let mut ops = Vec::new();
        emit(src, &src.expr, &mut ops);
        let mut depth = 0usize;
        let mut max = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var(_) | Op::Time | Op::Moment(_) => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                _ => {}
            }
            max = max.max(depth);
        }
        Self {
            ops,
            depth: max,
            source: src.clone(),
        }
    }

    pub fn source(&self) -> &DriftExpr {
        &self.source
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], moments: &[f64]) -> Result<f64> {
        let v = if self.depth <= 32 {
            let mut stack = [0.0f64; 32];
            run(&self.ops, &mut stack, t, x, moments)
        } else {
            let mut stack = vec![0.0f64; self.depth];
            run(&self.ops, &mut stack, t, x, moments)
        };
        match v {
            Some(v) if v.is_finite() => Ok(v),
            _ => match self.source.eval(t, x, moments) {
                Err(e) => Err(e),
                Ok(v) => Err(Error::Eval {
                    expr: self.source.to_string(),
                    reason: format!("non-finite value {v}"),
                }),
            },
        }
    }
}

fn emit(src: &DriftExpr, e: &Expr, ops: &mut Vec<Op>) {
    match e {
        Expr::Num(c) => ops.push(Op::Const(*c)),
        Expr::Var(i) => ops.push(Op::Var(*i)),
        Expr::Time => ops.push(Op::Time),
        Expr::Moment { order, coord } => ops.push(Op::Moment((*order as usize - 1) * src.m + src.resolve(*coord))),
        Expr::Neg(a) => {
            emit(src, a, ops);
            ops.push(Op::Neg);
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            emit(src, a, ops);
            emit(src, b, ops);
            ops.push(match e {
                Expr::Add(..) => Op::Add,
                Expr::Sub(..) => Op::Sub,
                Expr::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
        }
        Expr::Pow(a, k) => {
            emit(src, a, ops);
            ops.push(Op::Powi(*k));
        }
        Expr::Call(f, a) => {
            emit(src, a, ops);
            ops.push(Op::Call(*f));
        }
    }
}

#[inline]
fn run(ops: &[Op], stack: &mut [f64], t: f64, x: &[f64], mo: &[f64]) -> Option<f64> {
    let mut sp = 0usize;
    for op in ops {
        match *op {
            Op::Const(c) => {
                stack[sp] = c;
                sp += 1;
            }
            Op::Var(i) => {
                stack[sp] = *x.get(i)?;
                sp += 1;
            }
            Op::Time => {
                stack[sp] = t;
                sp += 1;
            }
            Op::Moment(i) => {
                stack[sp] = *mo.get(i)?;
                sp += 1;
            }
            Op::Neg => stack[sp - 1] = -stack[sp - 1],
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                sp -= 1;
                let b = stack[sp];
                let a = &mut stack[sp - 1];
                match *op {
                    Op::Add => *a += b,
                    Op::Sub => *a -= b,
                    Op::Mul => *a *= b,
                    _ => {
                        if b == 0.0 {
                            return None;
                        }
                        *a /= b
                    }
                }
            }
            Op::Powi(k) => stack[sp - 1] = stack[sp - 1].powi(k),
            Op::Call(f) => stack[sp - 1] = f.apply(stack[sp - 1]),
        }
    }
    Some(stack[0])
}
