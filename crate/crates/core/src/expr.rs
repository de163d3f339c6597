//! Expression language for phases, amplitudes and cutoffs.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          right associative
//! primary := number | 'i' | 'pi' | var | call | '(' expr ')'
//! var     := ('x' | 'y' | 'z' | 'theta' | 'sigma') digits   (1-based)
//! call    := name '(' args ')'
//! ```
//!
//! Calls: `exp`, `log`, `sqrt`, `sin`, `cos`, `bump`, `plateau` take one
//! argument. `norm(...)` takes any mix of group names (`theta`) and
//! expressions and returns the Euclidean norm of all components.
//!
//! `bump(s)` is `exp(-1/(1-s^2))` for `|s| < 1` and zero outside.
//! `plateau(s)` is one for `|s| <= 1/2`, zero for `|s| >= 1`, smooth in
//! between.
//!
//! Multivalued functions use principal branches.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use thiserror::Error;

/// Recognized variable group names.
pub const GROUP_NAMES: [&str; 5] = ["theta", "sigma", "x", "y", "z"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown identifier `{name}` at line {line}, column {col}")]
    UnknownIdentifier { name: String, line: usize, col: usize },
    #[error("`{func}` expects {expected} argument(s), found {found}")]
    Arity { func: String, expected: usize, found: usize },
    #[error("variable `{0}` is not part of the layout")]
    Unbound(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("point has {found} coordinates, layout expects {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Bump,
    Plateau,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "bump" => Func::Bump,
            "plateau" => Func::Plateau,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Bump => "bump",
            Func::Plateau => "plateau",
        }
    }
}

/// A variable reference such as `theta2` (group `theta`, 1-based index 2).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Var {
    pub group: String,
    pub index: usize,
}

impl Var {
    pub fn new(group: &str, index: usize) -> Self {
        Var { group: group.to_string(), index }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.group, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormArg {
    Group(String),
    Expr(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// The imaginary unit token `i`.
    Imag,
    Pi,
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
    Norm(Vec<NormArg>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        if v < 0.0 {
            Expr::Neg(Box::new(Expr::Num(-v)))
        } else {
            Expr::Num(v)
        }
    }

    pub fn var(group: &str, index: usize) -> Expr {
        Expr::Var(Var::new(group, index))
    }

    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn call(func: Func, a: Expr) -> Expr {
        Expr::Call(func, Box::new(a))
    }

    /// Norm over whole variable groups.
    pub fn norm_of_groups(groups: &[&str]) -> Expr {
        Expr::Norm(groups.iter().map(|g| NormArg::Group(g.to_string())).collect())
    }

    /// True when the tree contains no variables.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::Imag | Expr::Pi => true,
            Expr::Var(_) | Expr::Norm(_) => false,
            Expr::Neg(a) | Expr::Call(_, a) => a.is_constant(),
            Expr::Binary(_, a, b) => a.is_constant() && b.is_constant(),
        }
    }

    /// True when the tree involves `i`.
    pub fn has_imaginary(&self) -> bool {
        match self {
            Expr::Imag => true,
            Expr::Num(_) | Expr::Pi | Expr::Var(_) => false,
            Expr::Neg(a) | Expr::Call(_, a) => a.has_imaginary(),
            Expr::Binary(_, a, b) => a.has_imaginary() || b.has_imaginary(),
            Expr::Norm(args) => args.iter().any(|a| match a {
                NormArg::Group(_) => false,
                NormArg::Expr(e) => e.has_imaginary(),
            }),
        }
    }

    /// Variable groups referenced anywhere in the tree.
    pub fn groups(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_groups(&mut out);
        out
    }

    fn collect_groups(&self, out: &mut Vec<String>) {
        fn push(out: &mut Vec<String>, g: &str) {
            if !out.iter().any(|o| o == g) {
                out.push(g.to_string());
            }
        }
        match self {
            Expr::Var(v) => push(out, &v.group),
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_groups(out),
            Expr::Binary(_, a, b) => {
                a.collect_groups(out);
                b.collect_groups(out);
            }
            Expr::Norm(args) => {
                for a in args {
                    match a {
                        NormArg::Group(g) => push(out, g),
                        NormArg::Expr(e) => e.collect_groups(out),
                    }
                }
            }
            _ => {}
        }
    }

    /// Replace variables by expressions. Group arguments of `norm` are
    /// expanded component-wise (via `layout`) when any component is replaced.
    pub fn substitute(&self, layout: &VarLayout, map: &dyn Fn(&Var) -> Option<Expr>) -> Expr {
        match self {
            Expr::Var(v) => map(v).unwrap_or_else(|| self.clone()),
            Expr::Num(_) | Expr::Imag | Expr::Pi => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(layout, map))),
            Expr::Call(f, a) => Expr::Call(*f, Box::new(a.substitute(layout, map))),
            Expr::Binary(op, a, b) => Expr::binary(*op, a.substitute(layout, map), b.substitute(layout, map)),
            Expr::Norm(args) => {
                let mut out = Vec::new();
                for a in args {
                    match a {
                        NormArg::Group(g) => {
                            let size = layout.size_of(g);
                            let touched = (1..=size).any(|k| map(&Var::new(g, k)).is_some());
                            if touched {
                                for k in 1..=size {
                                    out.push(NormArg::Expr(Expr::var(g, k).substitute(layout, map)));
                                }
                            } else {
                                out.push(a.clone());
                            }
                        }
                        NormArg::Expr(e) => out.push(NormArg::Expr(e.substitute(layout, map))),
                    }
                }
                Expr::Norm(out)
            }
        }
    }

    /// Evaluate a variable-free expression.
    pub fn eval_constant(&self) -> Result<C64, EvalError> {
        let layout = VarLayout::default();
        let prog = Program::compile(self, &layout).map_err(|_| EvalError::Domain("expression is not constant"))?;
        prog.eval(&[])
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Add, self, rhs)
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Sub, self, rhs)
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Mul, self, rhs)
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Div, self, rhs)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self))
    }
}

fn needs_parens(e: &Expr) -> bool {
    matches!(e, Expr::Binary(..) | Expr::Neg(_)) || matches!(e, Expr::Num(v) if v.is_sign_negative())
}

struct Operand<'a>(&'a Expr);

impl fmt::Display for Operand<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if needs_parens(self.0) {
            write!(f, "({})", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if v.is_sign_negative() {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Imag => f.write_str("i"),
            Expr::Pi => f.write_str("pi"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "-{}", Operand(a)),
            Expr::Binary(op, a, b) => write!(f, "{} {} {}", Operand(a), op.symbol(), Operand(b)),
            Expr::Call(func, a) => write!(f, "{}({})", func.name(), a),
            Expr::Norm(args) => {
                f.write_str("norm(")?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    match a {
                        NormArg::Group(g) => f.write_str(g)?,
                        NormArg::Expr(e) => write!(f, "{e}")?,
                    }
                }
                f.write_str(")")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer and parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut k = 0;
    while k < chars.len() {
        let c = chars[k];
        if c == '\n' {
            line += 1;
            col = 1;
            k += 1;
            continue;
        }
        if c.is_whitespace() {
            col += 1;
            k += 1;
            continue;
        }
        let (tl, tc) = (line, col);
        if c.is_ascii_digit() || (c == '.' && chars.get(k + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = k;
            while k < chars.len() && (chars[k].is_ascii_digit() || chars[k] == '.') {
                k += 1;
            }
            if k < chars.len() && (chars[k] == 'e' || chars[k] == 'E') {
                let mut j = k + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    k = j;
                    while k < chars.len() && chars[k].is_ascii_digit() {
                        k += 1;
                    }
                }
            }
            let text: String = chars[start..k].iter().collect();
            let v = text.parse::<f64>().map_err(|_| ExprError::Syntax {
                line: tl,
                col: tc,
                msg: format!("malformed number `{text}`"),
            })?;
            col += k - start;
            out.push(Token { tok: Tok::Num(v), line: tl, col: tc });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = k;
            while k < chars.len() && (chars[k].is_ascii_alphanumeric() || chars[k] == '_') {
                k += 1;
            }
            let text: String = chars[start..k].iter().collect();
            col += k - start;
            out.push(Token { tok: Tok::Ident(text), line: tl, col: tc });
            continue;
        }
        if "+-*/^(),".contains(c) {
            out.push(Token { tok: Tok::Sym(c), line: tl, col: tc });
            col += 1;
            k += 1;
            continue;
        }
        return Err(ExprError::Syntax { line: tl, col: tc, msg: format!("unexpected character `{c}`") });
    }
    out.push(Token { tok: Tok::End, line, col });
    Ok(out)
}

/// Split `theta12` into (`theta`, 12).
fn split_var(name: &str) -> Option<(&'static str, usize)> {
    for g in GROUP_NAMES {
        if let Some(rest) = name.strip_prefix(g) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) && !rest.starts_with('0') {
                return rest.parse().ok().map(|k| (g, k));
            }
        }
    }
    None
}

fn group_name(name: &str) -> Option<&'static str> {
    GROUP_NAMES.iter().copied().find(|g| *g == name)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, ExprError> {
        let t = self.peek();
        Err(ExprError::Syntax { line: t.line, col: t.col, msg: msg.into() })
    }

    fn is_sym(&self, c: char) -> bool {
        self.peek().tok == Tok::Sym(c)
    }

    fn expect(&mut self, c: char, what: &str) -> Result<(), ExprError> {
        if self.is_sym(c) {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected `{c}` {what}"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.is_sym('+') {
                BinOp::Add
            } else if self.is_sym('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.is_sym('*') {
                BinOp::Mul
            } else if self.is_sym('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.is_sym('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.is_sym('^') {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::binary(BinOp::Pow, base, exp));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Sym('(') => {
                self.bump();
                let e = self.expr()?;
                self.expect(')', "to close parenthesis")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                if self.is_sym('(') {
                    return self.call(&name, t.line, t.col);
                }
                match name.as_str() {
                    "i" => Ok(Expr::Imag),
                    "pi" => Ok(Expr::Pi),
                    _ => match split_var(&name) {
                        Some((g, k)) => Ok(Expr::var(g, k)),
                        None => Err(ExprError::UnknownIdentifier { name, line: t.line, col: t.col }),
                    },
                }
            }
            Tok::End => self.error("unexpected end of input"),
            Tok::Sym(c) => self.error(format!("unexpected `{c}`")),
        }
    }

    fn call(&mut self, name: &str, line: usize, col: usize) -> Result<Expr, ExprError> {
        self.expect('(', "after function name")?;
        if name == "norm" {
            let mut args = Vec::new();
            loop {
                // A bare group name is a norm argument on its own.
                let is_group = matches!(&self.peek().tok, Tok::Ident(n) if group_name(n).is_some())
                    && matches!(self.toks.get(self.pos + 1).map(|t| &t.tok), Some(Tok::Sym(',')) | Some(Tok::Sym(')')));
                if is_group {
                    if let Tok::Ident(n) = self.bump().tok {
                        args.push(NormArg::Group(n));
                    }
                } else {
                    args.push(NormArg::Expr(self.expr()?));
                }
                if self.is_sym(',') {
                    self.bump();
                    continue;
                }
                self.expect(')', "to close argument list")?;
                break;
            }
            return Ok(Expr::Norm(args));
        }
        let func = Func::from_name(name)
            .ok_or_else(|| ExprError::UnknownIdentifier { name: name.to_string(), line, col })?;
        let mut args = vec![self.expr()?];
        while self.is_sym(',') {
            self.bump();
            args.push(self.expr()?);
        }
        self.expect(')', "to close argument list")?;
        if args.len() != 1 {
            return Err(ExprError::Arity { func: name.to_string(), expected: 1, found: args.len() });
        }
        Ok(Expr::Call(func, Box::new(args.pop().unwrap())))
    }
}

/// Parse source text into an expression tree.
pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if p.peek().tok != Tok::End {
        return p.error("unexpected trailing input");
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Layouts

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub name: String,
    pub size: usize,
    /// Frequency groups carry the homogeneity and exclude the origin.
    pub frequency: bool,
}

/// Ordered named variable groups; a point is the concatenation of all groups.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VarLayout {
    groups: Vec<Group>,
}

impl VarLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder; panics on duplicate names or zero sizes (programming errors).
    pub fn with(mut self, name: &str, size: usize, frequency: bool) -> Self {
        self.push(name, size, frequency).expect("invalid layout group");
        self
    }

    pub fn push(&mut self, name: &str, size: usize, frequency: bool) -> Result<(), String> {
        if group_name(name).is_none() {
            return Err(format!("unknown group name `{name}`"));
        }
        if self.groups.iter().any(|g| g.name == name) {
            return Err(format!("duplicate group `{name}`"));
        }
        if size == 0 {
            return Err(format!("group `{name}` must have size >= 1"));
        }
        self.groups.push(Group { name: name.to_string(), size, frequency });
        Ok(())
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn dim(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }

    pub fn group(&self, name: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn size_of(&self, name: &str) -> usize {
        self.group(name).map_or(0, |g| g.size)
    }

    /// Flat index range of a group.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut off = 0;
        for g in &self.groups {
            if g.name == name {
                return Some(off..off + g.size);
            }
            off += g.size;
        }
        None
    }

    pub fn index_of(&self, var: &Var) -> Option<usize> {
        let r = self.range(&var.group)?;
        (var.index >= 1 && var.index <= r.len()).then(|| r.start + var.index - 1)
    }

    /// Flat indices of all frequency-group variables.
    pub fn frequency_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut off = 0;
        for g in &self.groups {
            if g.frequency {
                out.extend(off..off + g.size);
            }
            off += g.size;
        }
        out
    }

    pub fn var_name(&self, flat: usize) -> String {
        let mut off = 0;
        for g in &self.groups {
            if flat < off + g.size {
                return format!("{}{}", g.name, flat - off + 1);
            }
            off += g.size;
        }
        format!("?{flat}")
    }

    /// Variable at a flat index.
    pub fn var_at(&self, flat: usize) -> Option<Var> {
        let mut off = 0;
        for g in &self.groups {
            if flat < off + g.size {
                return Some(Var::new(&g.name, flat - off + 1));
            }
            off += g.size;
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Scalars and compiled programs

/// Arithmetic needed to evaluate programs; implemented for complex numbers
/// and for truncated Taylor jets.
pub trait Scalar: Clone + Sized {
    type Ctx;
    fn constant(ctx: &Self::Ctx, c: C64) -> Self;
    /// Value part (constant Taylor coefficient for jets).
    fn value(&self) -> C64;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Result<Self, EvalError>;
    fn neg(&self) -> Self;
    fn powi(&self, n: i32) -> Result<Self, EvalError>;
    fn powc(&self, p: C64) -> Result<Self, EvalError>;
    fn exp(&self) -> Self;
    fn log(&self) -> Result<Self, EvalError>;
    fn sqrt(&self) -> Result<Self, EvalError>;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
}

impl Scalar for C64 {
    type Ctx = ();
    fn constant(_: &(), c: C64) -> Self {
        c
    }
    fn value(&self) -> C64 {
        *self
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Result<Self, EvalError> {
        if *o == C64::new(0.0, 0.0) {
            return Err(EvalError::Domain("division by zero"));
        }
        Ok(self / o)
    }
    fn neg(&self) -> Self {
        -self
    }
    fn powi(&self, n: i32) -> Result<Self, EvalError> {
        if n < 0 && *self == C64::new(0.0, 0.0) {
            return Err(EvalError::Domain("negative power of zero"));
        }
        Ok(num_complex::Complex::powi(self, n))
    }
    fn powc(&self, p: C64) -> Result<Self, EvalError> {
        if *self == C64::new(0.0, 0.0) {
            return if p.re > 0.0 { Ok(C64::new(0.0, 0.0)) } else { Err(EvalError::Domain("non-positive power of zero")) };
        }
        Ok(num_complex::Complex::powc(*self, p))
    }
    fn exp(&self) -> Self {
        num_complex::Complex::exp(*self)
    }
    fn log(&self) -> Result<Self, EvalError> {
        if *self == C64::new(0.0, 0.0) {
            return Err(EvalError::Domain("log of zero"));
        }
        Ok(num_complex::Complex::ln(*self))
    }
    fn sqrt(&self) -> Result<Self, EvalError> {
        Ok(num_complex::Complex::sqrt(*self))
    }
    fn sin(&self) -> Self {
        num_complex::Complex::sin(*self)
    }
    fn cos(&self) -> Self {
        num_complex::Complex::cos(*self)
    }
}

fn bump_of<S: Scalar>(ctx: &S::Ctx, s: &S) -> Result<S, EvalError> {
    let q = s.mul(s);
    if q.value().re >= 1.0 {
        return Ok(S::constant(ctx, C64::new(0.0, 0.0)));
    }
    let one = S::constant(ctx, C64::new(1.0, 0.0));
    Ok(one.div(&one.sub(&q))?.neg().exp())
}

fn plateau_real(x: f64) -> f64 {
    let q = x * x;
    if q <= 0.25 {
        return 1.0;
    }
    if q >= 1.0 {
        return 0.0;
    }
    let a = (-1.0 / (1.0 - q)).exp();
    let b = (-1.0 / (q - 0.25)).exp();
    a / (a + b)
}

fn plateau_of<S: Scalar>(ctx: &S::Ctx, s: &S) -> Result<S, EvalError> {
    let q = s.mul(s);
    let qr = q.value().re;
    if qr <= 0.25 {
        return Ok(S::constant(ctx, C64::new(1.0, 0.0)));
    }
    if qr >= 1.0 {
        return Ok(S::constant(ctx, C64::new(0.0, 0.0)));
    }
    let one = S::constant(ctx, C64::new(1.0, 0.0));
    let quarter = S::constant(ctx, C64::new(0.25, 0.0));
    let e = |u: &S| -> Result<S, EvalError> { Ok(one.div(u)?.neg().exp()) };
    let a = e(&one.sub(&q))?;
    let b = e(&q.sub(&quarter))?;
    a.div(&a.add(&b))
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Const(C64),
    Var(usize),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    PowI(i32),
    PowC(C64),
    Pow,
    Call(Func),
    Norm(usize),
}

/// An expression bound to a layout and flattened to stack code.
///
/// Immutable and `Send + Sync`; evaluation is pure.
#[derive(Debug, Clone)]
pub struct Program {
    ops: Arc<[Op]>,
    dim: usize,
    depth: usize,
    source: Arc<Expr>,
}

impl Program {
    pub fn compile(e: &Expr, layout: &VarLayout) -> Result<Program, ExprError> {
        let mut ops = Vec::new();
        emit(e, layout, &mut ops)?;
        let mut depth = 0usize;
        let mut cur = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var(_) => cur += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => cur -= 1,
                Op::Norm(k) => cur = cur + 1 - k,
                _ => {}
            }
            depth = depth.max(cur);
        }
        Ok(Program { ops: ops.into(), dim: layout.dim(), depth, source: Arc::new(e.clone()) })
    }

    pub fn parse(src: &str, layout: &VarLayout) -> Result<Program, ExprError> {
        Program::compile(&parse(src)?, layout)
    }

    pub fn expr(&self) -> &Expr {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, point: &[C64]) -> Result<C64, EvalError> {
        self.eval_generic(&(), point)
    }

    /// Evaluate at a real point. Hot path of the quadrature oracles, so
    /// the operand stack is reused per thread.
    pub fn eval_real(&self, point: &[f64]) -> Result<C64, EvalError> {
        thread_local! {
            static STACK: std::cell::RefCell<Vec<C64>> = const { std::cell::RefCell::new(Vec::new()) };
        }
        if point.len() != self.dim {
            return Err(EvalError::Dimension { expected: self.dim, found: point.len() });
        }
        if self.depth <= 32 {
            let mut stack = [C64::new(0.0, 0.0); 32];
            return self.run_c64(|k| C64::new(point[k], 0.0), &mut stack);
        }
        STACK.with(|cell| {
            let mut stack = cell.borrow_mut();
            stack.resize(self.depth.max(1), C64::new(0.0, 0.0));
            self.run_c64(|k| C64::new(point[k], 0.0), &mut stack)
        })
    }

    /// `run` specialised to `C64` with an indexed stack; transcendental
    /// calls on real arguments go through `f64`.
    fn run_c64(&self, var: impl Fn(usize) -> C64, st: &mut [C64]) -> Result<C64, EvalError> {
        let zero = C64::new(0.0, 0.0);
        let mut sp = 0;
        for op in self.ops.iter() {
            match op {
                Op::Const(c) => {
                    st[sp] = *c;
                    sp += 1;
                }
                Op::Var(k) => {
                    st[sp] = var(*k);
                    sp += 1;
                }
                Op::Neg => st[sp - 1] = -st[sp - 1],
                Op::PowI(n) => st[sp - 1] = Scalar::powi(&st[sp - 1], *n)?,
                Op::PowC(p) => st[sp - 1] = Scalar::powc(&st[sp - 1], *p)?,
                Op::Call(f) => {
                    let a = st[sp - 1];
                    st[sp - 1] = if a.im == 0.0 {
                        let x = a.re;
                        match f {
                            Func::Exp => C64::new(x.exp(), 0.0),
                            Func::Sin => C64::new(x.sin(), 0.0),
                            Func::Cos => C64::new(x.cos(), 0.0),
                            Func::Bump => C64::new(if x * x >= 1.0 { 0.0 } else { (-1.0 / (1.0 - x * x)).exp() }, 0.0),
                            Func::Plateau => C64::new(plateau_real(x), 0.0),
                            Func::Log if x > 0.0 => C64::new(x.ln(), 0.0),
                            Func::Sqrt if x >= 0.0 => C64::new(x.sqrt(), 0.0),
                            Func::Log => Scalar::log(&a)?,
                            Func::Sqrt => Scalar::sqrt(&a)?,
                        }
                    } else {
                        match f {
                            Func::Exp => a.exp(),
                            Func::Log => Scalar::log(&a)?,
                            Func::Sqrt => Scalar::sqrt(&a)?,
                            Func::Sin => a.sin(),
                            Func::Cos => a.cos(),
                            Func::Bump => bump_of(&(), &a)?,
                            Func::Plateau => plateau_of(&(), &a)?,
                        }
                    };
                }
                Op::Norm(k) => {
                    let mut acc = zero;
                    for v in &st[sp - k..sp] {
                        acc += v * v;
                    }
                    sp -= k;
                    st[sp] = acc.sqrt();
                    sp += 1;
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => {
                    let (a, b) = (st[sp - 2], st[sp - 1]);
                    sp -= 1;
                    st[sp - 1] = match op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        Op::Div => Scalar::div(&a, &b)?,
                        _ => Scalar::log(&a)?.mul(&b).exp(),
                    };
                }
            }
        }
        Ok(st[0])
    }

    pub fn eval_generic<S: Scalar>(&self, ctx: &S::Ctx, point: &[S]) -> Result<S, EvalError> {
        if point.len() != self.dim {
            return Err(EvalError::Dimension { expected: self.dim, found: point.len() });
        }
        let mut stack: Vec<S> = Vec::with_capacity(self.depth);
        self.run(ctx, |k| point[k].clone(), &mut stack)
    }

    fn run<S: Scalar>(&self, ctx: &S::Ctx, var: impl Fn(usize) -> S, stack: &mut Vec<S>) -> Result<S, EvalError> {
        for op in self.ops.iter() {
            match op {
                Op::Const(c) => stack.push(S::constant(ctx, *c)),
                Op::Var(k) => stack.push(var(*k)),
                Op::Neg => {
                    let a = stack.pop().unwrap();
                    stack.push(a.neg());
                }
                Op::PowI(n) => {
                    let a = stack.pop().unwrap();
                    stack.push(a.powi(*n)?);
                }
                Op::PowC(p) => {
                    let a = stack.pop().unwrap();
                    stack.push(a.powc(*p)?);
                }
                Op::Call(f) => {
                    let a = stack.pop().unwrap();
                    stack.push(match f {
                        Func::Exp => a.exp(),
                        Func::Log => a.log()?,
                        Func::Sqrt => a.sqrt()?,
                        Func::Sin => a.sin(),
                        Func::Cos => a.cos(),
                        Func::Bump => bump_of(ctx, &a)?,
                        Func::Plateau => plateau_of(ctx, &a)?,
                    });
                }
                Op::Norm(k) => {
                    let start = stack.len() - k;
                    let mut acc = S::constant(ctx, C64::new(0.0, 0.0));
                    for v in stack.drain(start..) {
                        acc = acc.add(&v.mul(&v));
                    }
                    stack.push(acc.sqrt()?);
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    stack.push(match op {
                        Op::Add => a.add(&b),
                        Op::Sub => a.sub(&b),
                        Op::Mul => a.mul(&b),
                        Op::Div => a.div(&b)?,
                        _ => a.log()?.mul(&b).exp(),
                    });
                }
            }
        }
        Ok(stack.pop().expect("empty program"))
    }
}

fn emit(e: &Expr, layout: &VarLayout, ops: &mut Vec<Op>) -> Result<(), ExprError> {
    match e {
        Expr::Num(v) => ops.push(Op::Const(C64::new(*v, 0.0))),
        Expr::Imag => ops.push(Op::Const(C64::new(0.0, 1.0))),
        Expr::Pi => ops.push(Op::Const(C64::new(std::f64::consts::PI, 0.0))),
        Expr::Var(v) => {
            let k = layout.index_of(v).ok_or_else(|| ExprError::Unbound(v.to_string()))?;
            ops.push(Op::Var(k));
        }
        Expr::Neg(a) => {
            emit(a, layout, ops)?;
            ops.push(Op::Neg);
        }
        Expr::Call(f, a) => {
            emit(a, layout, ops)?;
            ops.push(Op::Call(*f));
        }
        Expr::Norm(args) => {
            let mut count = 0;
            for a in args {
                match a {
                    NormArg::Group(g) => {
                        let r = layout.range(g).ok_or_else(|| ExprError::Unbound(g.clone()))?;
                        for k in r {
                            ops.push(Op::Var(k));
                            count += 1;
                        }
                    }
                    NormArg::Expr(x) => {
                        emit(x, layout, ops)?;
                        count += 1;
                    }
                }
            }
            ops.push(Op::Norm(count));
        }
        Expr::Binary(BinOp::Pow, a, b) if b.is_constant() => {
            let p = b.eval_constant().map_err(|err| ExprError::Syntax { line: 0, col: 0, msg: err.to_string() })?;
            emit(a, layout, ops)?;
            if p.im == 0.0 && p.re.fract() == 0.0 && p.re.abs() <= 64.0 {
                ops.push(Op::PowI(p.re as i32));
            } else {
                ops.push(Op::PowC(p));
            }
        }
        Expr::Binary(op, a, b) => {
            emit(a, layout, ops)?;
            emit(b, layout, ops)?;
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
                BinOp::Pow => Op::Pow,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn layout_x_theta(n: usize, big_n: usize) -> VarLayout {
        VarLayout::new().with("x", n, false).with("theta", big_n, true)
    }

    #[test]
    fn parses_product() {
        let e = parse("x1*theta1").unwrap();
        assert_eq!(e, Expr::var("x", 1) * Expr::var("theta", 1));
    }

    #[test]
    fn parses_complex_phase() {
        let e = parse("x1*theta1 + i*norm(theta)*x1^2/2").unwrap();
        assert!(e.has_imaginary());
        let expected = Expr::var("x", 1) * Expr::var("theta", 1)
            + Expr::Imag * Expr::norm_of_groups(&["theta"])
                * Expr::binary(BinOp::Pow, Expr::var("x", 1), Expr::Num(2.0))
                / Expr::Num(2.0);
        assert_eq!(e, expected);
    }

    #[test]
    fn unclosed_paren_is_syntax_error() {
        match parse("x1*(theta1") {
            Err(ExprError::Syntax { line, col, .. }) => assert_eq!((line, col), (1, 11)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_unknown_identifier_and_arity() {
        assert!(matches!(parse("foo + 1"), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(parse("x0"), Err(ExprError::UnknownIdentifier { .. })));
        assert!(matches!(parse("exp(x1, x2)"), Err(ExprError::Arity { found: 2, .. })));
        assert!(matches!(parse("bar(x1)"), Err(ExprError::UnknownIdentifier { .. })));
    }

    #[test]
    fn precedence() {
        // ^ binds tighter than unary minus, which binds tighter than * /.
        assert_eq!(parse("-x1^2").unwrap(), -Expr::binary(BinOp::Pow, Expr::var("x", 1), Expr::Num(2.0)));
        let e = parse("2^3^2").unwrap();
        assert_eq!(e.eval_constant().unwrap(), c(512.0, 0.0));
        assert_eq!(parse("1 - 2 - 3").unwrap().eval_constant().unwrap(), c(-4.0, 0.0));
        assert_eq!(parse("8/4/2").unwrap().eval_constant().unwrap(), c(1.0, 0.0));
        assert_eq!(parse("2^-1").unwrap().eval_constant().unwrap(), c(0.5, 0.0));
    }

    #[test]
    fn eval_examples() {
        let l = VarLayout::new().with("x", 1, false);
        assert_eq!(Program::parse("x1^2", &l).unwrap().eval(&[c(2.0, 0.0)]).unwrap(), c(4.0, 0.0));
        assert_eq!(Program::parse("i*x1", &l).unwrap().eval(&[c(3.0, 0.0)]).unwrap(), c(0.0, 3.0));
        let l2 = VarLayout::new().with("theta", 2, true);
        let v = Program::parse("norm(theta)", &l2).unwrap().eval_real(&[3.0, 4.0]).unwrap();
        assert_eq!(v, c(5.0, 0.0));
    }

    #[test]
    fn domain_errors() {
        let l = VarLayout::new().with("x", 1, false);
        let p = Program::parse("log(x1)", &l).unwrap();
        assert!(matches!(p.eval_real(&[0.0]), Err(EvalError::Domain(_))));
        let p = Program::parse("1/x1", &l).unwrap();
        assert!(matches!(p.eval_real(&[0.0]), Err(EvalError::Domain(_))));
        assert!(matches!(p.eval_real(&[0.0, 1.0]), Err(EvalError::Dimension { .. })));
    }

    #[test]
    fn unbound_variable_on_compile() {
        let l = VarLayout::new().with("x", 1, false);
        assert!(matches!(Program::parse("x2", &l), Err(ExprError::Unbound(_))));
        assert!(matches!(Program::parse("norm(theta)", &l), Err(ExprError::Unbound(_))));
    }

    #[test]
    fn cutoff_profiles() {
        let l = VarLayout::new().with("x", 1, false);
        let b = Program::parse("bump(x1)", &l).unwrap();
        assert!((b.eval_real(&[0.0]).unwrap() - c((-1.0f64).exp(), 0.0)).norm() < 1e-15);
        assert_eq!(b.eval_real(&[1.0]).unwrap(), c(0.0, 0.0));
        let p = Program::parse("plateau(x1)", &l).unwrap();
        assert_eq!(p.eval_real(&[0.3]).unwrap(), c(1.0, 0.0));
        assert_eq!(p.eval_real(&[-1.2]).unwrap(), c(0.0, 0.0));
        let mid = p.eval_real(&[0.75]).unwrap().re;
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn substitution_expands_norm_groups() {
        let l = VarLayout::new().with("x", 1, false).with("theta", 2, true);
        let e = parse("x1*norm(theta)").unwrap();
        let s = e.substitute(&l, &|v| (v.group == "theta" && v.index == 2).then_some(Expr::Num(4.0)));
        assert_eq!(s.to_string(), "x1 * norm(theta1, 4)");
        let v = Program::compile(&s, &l).unwrap().eval_real(&[2.0, 3.0, 0.0]).unwrap();
        assert_eq!(v, c(10.0, 0.0));
    }

    #[test]
    fn layout_rejects_duplicates() {
        let mut l = VarLayout::new();
        l.push("x", 2, false).unwrap();
        assert!(l.push("x", 1, false).is_err());
        assert!(l.push("y", 0, false).is_err());
        assert!(l.push("w", 1, false).is_err());
        assert_eq!(layout_x_theta(2, 3).frequency_indices(), vec![2, 3, 4]);
    }

    #[test]
    fn homogeneous_phase_scales() {
        let l = layout_x_theta(1, 2);
        let p = Program::parse("x1*theta1 + i*norm(theta)*x1^2/2", &l).unwrap();
        for t in [0.5, 2.0, 10.0] {
            let a = p.eval_real(&[0.3, 0.7, -0.2]).unwrap();
            let b = p.eval_real(&[0.3, 0.7 * t, -0.2 * t]).unwrap();
            assert!((b - a * t).norm() <= 1e-12 * (1.0 + a.norm()));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn leaf() -> impl Strategy<Value = Expr> {
            prop_oneof![
                (0u32..1000).prop_map(|k| Expr::Num(k as f64 / 8.0)),
                Just(Expr::Imag),
                Just(Expr::Pi),
                (1usize..3).prop_map(|k| Expr::var("x", k)),
                (1usize..3).prop_map(|k| Expr::var("theta", k)),
                Just(Expr::norm_of_groups(&["theta"])),
            ]
        }

        fn tree() -> impl Strategy<Value = Expr> {
            leaf().prop_recursive(4, 32, 2, |inner| {
                prop_oneof![
                    inner.clone().prop_map(|a| -a),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| a + b),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| a - b),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| a / b),
                    (inner.clone(), 0u32..4).prop_map(|(a, k)| Expr::binary(BinOp::Pow, a, Expr::Num(k as f64))),
                    inner.clone().prop_map(|a| Expr::call(Func::Sin, a)),
                    inner.prop_map(|a| Expr::call(Func::Exp, a)),
                ]
            })
        }

        fn real_tree() -> impl Strategy<Value = Expr> {
            tree().prop_filter("real coefficients", |e| !e.has_imaginary())
        }

        proptest! {
            #[test]
            fn print_parse_round_trip(e in tree()) {
                let printed = e.to_string();
                let back = parse(&printed).unwrap();
                prop_assert_eq!(back, e);
            }

            #[test]
            fn real_trees_evaluate_real(e in real_tree(), a in -2.0f64..2.0, b in 0.1f64..2.0, c2 in 0.1f64..2.0) {
                let l = VarLayout::new().with("x", 2, false).with("theta", 2, true);
                let p = Program::compile(&e, &l).unwrap();
                if let Ok(v) = p.eval_real(&[a, b, c2, a * b]) {
                    if v.re.is_finite() {
                        prop_assert!(v.im.abs() <= 1e-15);
                    }
                }
            }
        }
    }
}
