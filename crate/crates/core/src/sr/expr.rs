//! Expression trees over a single variable `U`, stored in prefix order.
//!
//! Text form is ordinary infix: `0.0132 + 0.0198*exp(2.05*U)`. Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'U' | ('exp' | 'sqrt' | 'square') '(' expr ')' | '(' expr ')'
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators smaller than this in magnitude are a guard error.
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryOp {
    Neg,
    Exp,
    Square,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryOp {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "/")]
    Div,
    #[serde(rename = "^")]
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Const(f64),
    Var,
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl Node {
    pub fn arity(self) -> usize {
        match self {
            Node::Const(_) | Node::Var => 0,
            Node::Unary(_) => 1,
            Node::Binary(_) => 2,
        }
    }
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Square => "square",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> std::result::Result<f64, &'static str> {
        match self {
            UnaryOp::Neg => Ok(-x),
            UnaryOp::Exp => Ok(x.exp()),
            UnaryOp::Square => Ok(x * x),
            UnaryOp::Sqrt => {
                if x < 0.0 {
                    Err("sqrt of a negative number")
                } else {
                    Ok(x.sqrt())
                }
            }
        }
    }
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> std::result::Result<f64, &'static str> {
        match self {
            BinaryOp::Add => Ok(a + b),
            BinaryOp::Sub => Ok(a - b),
            BinaryOp::Mul => Ok(a * b),
            BinaryOp::Div => {
                if b.abs() < DIV_GUARD {
                    Err("division by a near-zero denominator")
                } else {
                    Ok(a / b)
                }
            }
            BinaryOp::Pow => {
                if a < 0.0 {
                    Err("power of a negative base")
                } else {
                    Ok(a.powf(b))
                }
            }
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinaryOp::Add | BinaryOp::Sub => 1,
            BinaryOp::Mul | BinaryOp::Div => 2,
            BinaryOp::Pow => 4,
        }
    }
}

/// Expression tree in prefix order; complexity is the node count.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicExpr {
    nodes: Vec<Node>,
}

impl SymbolicExpr {
    /// Wraps a prefix node list, checking arity.
    pub fn from_prefix(nodes: Vec<Node>) -> Result<Self> {
        let mut need: i64 = 1;
        for (k, n) in nodes.iter().enumerate() {
            if need == 0 {
                return Err(Error::InvalidInput(format!("trailing nodes from position {k}")));
            }
            need += n.arity() as i64 - 1;
        }
        if need != 0 || nodes.is_empty() {
            return Err(Error::InvalidInput("incomplete expression tree".into()));
        }
        Ok(SymbolicExpr { nodes })
    }

    pub(crate) fn from_prefix_unchecked(nodes: Vec<Node>) -> Self {
        SymbolicExpr { nodes }
    }

    pub fn constant(c: f64) -> Self {
        SymbolicExpr {
            nodes: vec![Node::Const(c)],
        }
    }

    pub fn var() -> Self {
        SymbolicExpr { nodes: vec![Node::Var] }
    }

    pub fn unary(op: UnaryOp, a: SymbolicExpr) -> Self {
        let mut nodes = Vec::with_capacity(a.nodes.len() + 1);
        nodes.push(Node::Unary(op));
        nodes.extend(a.nodes);
        SymbolicExpr { nodes }
    }

    pub fn binary(op: BinaryOp, a: SymbolicExpr, b: SymbolicExpr) -> Self {
        let mut nodes = Vec::with_capacity(a.nodes.len() + b.nodes.len() + 1);
        nodes.push(Node::Binary(op));
        nodes.extend(a.nodes);
        nodes.extend(b.nodes);
        SymbolicExpr { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn complexity(&self) -> usize {
        self.nodes.len()
    }

    /// Index one past the end of the subtree rooted at `start`.
    pub fn subtree_end(&self, start: usize) -> usize {
        subtree_end(&self.nodes, start)
    }

    pub fn constants(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Const(c) => Some(*c),
                _ => None,
            })
            .collect()
    }

    pub fn n_constants(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Const(_))).count()
    }

    /// Replaces constants in prefix order.
    pub fn set_constants(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for n in &mut self.nodes {
            if let Node::Const(c) = n {
                *c = *it.next().expect("constant count mismatch");
            }
        }
    }

    pub fn with_constants(&self, values: &[f64]) -> Self {
        let mut e = self.clone();
        e.set_constants(values);
        e
    }

    /// Exact tree evaluation with domain guards.
    pub fn eval(&self, u: f64) -> Result<f64> {
        if !u.is_finite() {
            return Err(Error::Guard(format!("non-finite input {u}")));
        }
        let mut stack: Vec<f64> = Vec::with_capacity(self.nodes.len());
        for n in self.nodes.iter().rev() {
            let v = match *n {
                Node::Const(c) => c,
                Node::Var => u,
                Node::Unary(op) => {
                    let a = stack.pop().expect("well-formed");
                    op.apply(a).map_err(|m| Error::Guard(m.into()))?
                }
                Node::Binary(op) => {
                    let a = stack.pop().expect("well-formed");
                    let b = stack.pop().expect("well-formed");
                    op.apply(a, b).map_err(|m| Error::Guard(m.into()))?
                }
            };
            if !v.is_finite() {
                return Err(Error::Guard(format!("non-finite intermediate value at U = {u}")));
            }
            stack.push(v);
        }
        Ok(stack[0])
    }

    /// Column-wise evaluation over many inputs. Returns `false` when any guard trips.
    pub fn eval_batch(&self, xs: &[f64], out: &mut Vec<f64>, scratch: &mut Vec<Vec<f64>>) -> bool {
        let n = xs.len();
        let mut depth = 0usize;
        for node in self.nodes.iter().rev() {
            match *node {
                Node::Const(c) => {
                    ensure_slot(scratch, depth, n);
                    scratch[depth].iter_mut().for_each(|v| *v = c);
                    depth += 1;
                }
                Node::Var => {
                    ensure_slot(scratch, depth, n);
                    scratch[depth].copy_from_slice(xs);
                    depth += 1;
                }
                Node::Unary(op) => {
                    let a = &mut scratch[depth - 1];
                    match op {
                        UnaryOp::Neg => a.iter_mut().for_each(|v| *v = -*v),
                        UnaryOp::Exp => a.iter_mut().for_each(|v| *v = v.exp()),
                        UnaryOp::Square => a.iter_mut().for_each(|v| *v *= *v),
                        UnaryOp::Sqrt => {
                            if a.iter().any(|v| *v < 0.0) {
                                return false;
                            }
                            a.iter_mut().for_each(|v| *v = v.sqrt());
                        }
                    }
                }
                Node::Binary(op) => {
                    // stack top (depth-1) is the left operand, depth-2 the right
                    let (lo, hi) = scratch.split_at_mut(depth - 1);
                    let b = &mut lo[depth - 2];
                    let a = &hi[0];
                    match op {
                        BinaryOp::Add => b.iter_mut().zip(a).for_each(|(r, l)| *r = l + *r),
                        BinaryOp::Sub => b.iter_mut().zip(a).for_each(|(r, l)| *r = l - *r),
                        BinaryOp::Mul => b.iter_mut().zip(a).for_each(|(r, l)| *r *= l),
                        BinaryOp::Div => {
                            if b.iter().any(|r| r.abs() < DIV_GUARD) {
                                return false;
                            }
                            b.iter_mut().zip(a).for_each(|(r, l)| *r = l / *r);
                        }
                        BinaryOp::Pow => {
                            if a.iter().any(|l| *l < 0.0) {
                                return false;
                            }
                            b.iter_mut().zip(a).for_each(|(r, l)| *r = l.powf(*r));
                        }
                    }
                    depth -= 1;
                }
            }
            if scratch[depth - 1].iter().any(|v| !v.is_finite()) {
                return false;
            }
        }
        out.clear();
        out.extend_from_slice(&scratch[0]);
        true
    }

    /// Textual form accepted by [`SymbolicExpr::parse`].
    pub fn parse(s: &str) -> Result<Self> {
        Parser::new(s).parse()
    }

    /// Replaces the subtree at `start` with `replacement`.
    pub fn replace_subtree(&self, start: usize, replacement: &[Node]) -> Self {
        let end = self.subtree_end(start);
        let mut nodes = Vec::with_capacity(self.nodes.len() - (end - start) + replacement.len());
        nodes.extend_from_slice(&self.nodes[..start]);
        nodes.extend_from_slice(replacement);
        nodes.extend_from_slice(&self.nodes[end..]);
        SymbolicExpr { nodes }
    }

    pub fn subtree(&self, start: usize) -> &[Node] {
        &self.nodes[start..self.subtree_end(start)]
    }
}

fn ensure_slot(scratch: &mut Vec<Vec<f64>>, depth: usize, n: usize) {
    if scratch.len() <= depth {
        scratch.resize_with(depth + 1, Vec::new);
    }
    scratch[depth].resize(n, 0.0);
}

pub(crate) fn subtree_end(nodes: &[Node], start: usize) -> usize {
    let mut need = 1usize;
    let mut k = start;
    while need > 0 {
        need = need + nodes[k].arity() - 1;
        k += 1;
    }
    k
}

impl FromStr for SymbolicExpr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

const PREC_NEG: u8 = 3;
const PREC_ATOM: u8 = 5;

impl SymbolicExpr {
    fn prec_of(&self, k: usize) -> u8 {
        match self.nodes[k] {
            Node::Const(c) if c < 0.0 || (c == 0.0 && c.is_sign_negative()) => PREC_NEG,
            Node::Const(_) | Node::Var => PREC_ATOM,
            Node::Unary(UnaryOp::Neg) => PREC_NEG,
            Node::Unary(_) => PREC_ATOM,
            Node::Binary(op) => op.precedence(),
        }
    }

    fn write_node(&self, k: usize, out: &mut String) -> usize {
        match self.nodes[k] {
            Node::Const(c) => {
                out.push_str(&format_const(c));
                k + 1
            }
            Node::Var => {
                out.push('U');
                k + 1
            }
            Node::Unary(UnaryOp::Neg) => {
                out.push('-');
                let child = k + 1;
                // `-(0.3)` keeps Neg(Const) distinct from a negative literal
                let wrap = self.prec_of(child) <= PREC_NEG || matches!(self.nodes[child], Node::Const(_));
                self.write_wrapped(child, wrap, out)
            }
            Node::Unary(op) => {
                out.push_str(op.name());
                out.push('(');
                let end = self.write_node(k + 1, out);
                out.push(')');
                end
            }
            Node::Binary(op) => {
                let p = op.precedence();
                let left = k + 1;
                let lp = self.prec_of(left);
                let wrap_left = if op == BinaryOp::Pow { lp <= p } else { lp < p };
                let right = self.write_wrapped(left, wrap_left, out);
                out.push_str(match op {
                    BinaryOp::Add => " + ",
                    BinaryOp::Sub => " - ",
                    BinaryOp::Mul => "*",
                    BinaryOp::Div => "/",
                    BinaryOp::Pow => "^",
                });
                let rp = self.prec_of(right);
                let wrap_right = match op {
                    BinaryOp::Add | BinaryOp::Mul => rp <= p,
                    BinaryOp::Sub | BinaryOp::Div => rp <= p,
                    BinaryOp::Pow => rp < p,
                } || rp == PREC_NEG;
                self.write_wrapped(right, wrap_right, out)
            }
        }
    }

    fn write_wrapped(&self, k: usize, wrap: bool, out: &mut String) -> usize {
        if wrap {
            out.push('(');
        }
        let end = self.write_node(k, out);
        if wrap {
            out.push(')');
        }
        end
    }
}

fn format_const(c: f64) -> String {
    format!("{c}")
}

impl fmt::Display for SymbolicExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_node(0, &mut s);
        f.write_str(&s)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(s: &'a str) -> Self {
        Parser {
            src: s.as_bytes(),
            pos: 0,
        }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            Some(x) => self.err(format!("expected `{}`, found `{}`", c as char, x as char)),
            None => self.err(format!("expected `{}`, found end of input", c as char)),
        }
    }

    fn parse(mut self) -> Result<SymbolicExpr> {
        let e = self.expr()?;
        if let Some(c) = self.peek() {
            return self.err(format!("unexpected `{}`", c as char));
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<SymbolicExpr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinaryOp::Add,
                Some(b'-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = SymbolicExpr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<SymbolicExpr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinaryOp::Mul,
                Some(b'/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = SymbolicExpr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<SymbolicExpr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let literal = matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.');
            let inner = if literal { self.power()? } else { self.unary()? };
            // a negated bare literal is a negative constant
            if literal {
                if let [Node::Const(c)] = inner.nodes() {
                    return Ok(SymbolicExpr::constant(-c));
                }
            }
            return Ok(SymbolicExpr::unary(UnaryOp::Neg, inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<SymbolicExpr> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(SymbolicExpr::binary(BinaryOp::Pow, base, exp));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<SymbolicExpr> {
        match self.peek() {
            None => self.err("unexpected end of input"),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                let op = match name {
                    "U" => return Ok(SymbolicExpr::var()),
                    "exp" => UnaryOp::Exp,
                    "sqrt" => UnaryOp::Sqrt,
                    "square" => UnaryOp::Square,
                    _ => {
                        self.pos = start;
                        return self.err(format!("unknown identifier `{name}`"));
                    }
                };
                self.expect(b'(')?;
                let arg = self.expr()?;
                self.expect(b')')?;
                Ok(SymbolicExpr::unary(op, arg))
            }
            Some(c) => self.err(format!("unexpected `{}`", c as char)),
        }
    }

    fn number(&mut self) -> Result<SymbolicExpr> {
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < s.len() && s[self.pos].is_ascii_digit() {
                while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) => Ok(SymbolicExpr::constant(v)),
            Err(_) => {
                self.pos = start;
                self.err(format!("malformed number `{text}`"))
            }
        }
    }
}
