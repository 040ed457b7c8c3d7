//! Expression trees in prefix (Polish) token form.
//!
//! An equation is a sequence of tokens such as `mul x1 add x2 1`, read
//! depth-first: every operator consumes the next `arity` complete subtrees.
//! [`ExprTree`] is the parsed form; it evaluates datasets column-wise,
//! reports a weighted structural complexity, and canonicalises itself into a
//! rational normal form (see [`canon`]) for symbolic-equivalence checks.

mod canon;

pub use canon::{canonicalize, symbolically_equal, CanonicalForm, Equivalence};

use ndarray::{Array1, Array2};
use num_rational::Rational64;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// A numeric literal leaf.
///
/// Literals parsed from text are exact rationals (`3`, `1/3`, `3.39`); values
/// bound into constant placeholders by the numeric fitter stay as raw floats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    /// Exact rational, e.g. an integer leaf or a decimal ground-truth constant.
    Rational(Rational64),
    /// Fitted floating-point constant.
    Float(f64),
}

impl Literal {
    pub fn int(v: i64) -> Self {
        Literal::Rational(Rational64::from_integer(v))
    }

    /// Numeric value used during evaluation.
    pub fn value(&self) -> f64 {
        match self {
            Literal::Rational(r) => *r.numer() as f64 / *r.denom() as f64,
            Literal::Float(v) => *v,
        }
    }
}

/// One prefix token. Variables are 1-based (`x1` … `xd`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Token {
    Add,
    Sub,
    Mul,
    Div,
    /// Binary power `pow a b` = `a^b`.
    Pow,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    /// Unary square/cube/… sugar; expanded to repeated multiplication when
    /// canonicalised.
    Pow2,
    Pow3,
    Pow4,
    Pow5,
    Var(u8),
    Literal(Literal),
    /// Placeholder for a constant to be fitted numerically.
    Const,
}

impl Token {
    pub fn arity(&self) -> usize {
        match self {
            Token::Add | Token::Sub | Token::Mul | Token::Div | Token::Pow => 2,
            Token::Exp
            | Token::Log
            | Token::Sin
            | Token::Cos
            | Token::Sqrt
            | Token::Pow2
            | Token::Pow3
            | Token::Pow4
            | Token::Pow5 => 1,
            Token::Var(_) | Token::Literal(_) | Token::Const => 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.arity() == 0
    }

    /// True for tokens whose value does not depend on any variable.
    pub fn is_constant_like(&self) -> bool {
        matches!(self, Token::Literal(_) | Token::Const)
    }

    pub fn is_trig(&self) -> bool {
        matches!(self, Token::Sin | Token::Cos)
    }

    /// The unary inverse partner, if any (`exp` ↔ `log`).
    pub fn unary_inverse(&self) -> Option<Token> {
        match self {
            Token::Exp => Some(Token::Log),
            Token::Log => Some(Token::Exp),
            _ => None,
        }
    }

    /// Structural complexity weight: cheap arithmetic and leaves cost 1,
    /// division 2, trigonometry 3, exp/log 4.
    pub fn complexity_weight(&self) -> u32 {
        match self {
            Token::Div => 2,
            Token::Sin | Token::Cos => 3,
            Token::Exp | Token::Log => 4,
            _ => 1,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Token::Add => "add".into(),
            Token::Sub => "sub".into(),
            Token::Mul => "mul".into(),
            Token::Div => "div".into(),
            Token::Pow => "pow".into(),
            Token::Exp => "exp".into(),
            Token::Log => "log".into(),
            Token::Sin => "sin".into(),
            Token::Cos => "cos".into(),
            Token::Sqrt => "sqrt".into(),
            Token::Pow2 => "pow2".into(),
            Token::Pow3 => "pow3".into(),
            Token::Pow4 => "pow4".into(),
            Token::Pow5 => "pow5".into(),
            Token::Var(i) => format!("x{i}"),
            Token::Const => "const".into(),
            Token::Literal(Literal::Rational(r)) => {
                if r.denom() == &1 {
                    format!("{}", r.numer())
                } else {
                    format!("{}/{}", r.numer(), r.denom())
                }
            }
            Token::Literal(Literal::Float(v)) => format!("{v:?}"),
        }
    }

    /// Parses one whitespace-delimited token name.
    pub fn from_name(text: &str) -> Result<Token, ExprError> {
        let tok = match text {
            "add" => Token::Add,
            "sub" => Token::Sub,
            "mul" => Token::Mul,
            "div" => Token::Div,
            "pow" => Token::Pow,
            "exp" => Token::Exp,
            "log" => Token::Log,
            "sin" => Token::Sin,
            "cos" => Token::Cos,
            "sqrt" => Token::Sqrt,
            "pow2" => Token::Pow2,
            "pow3" => Token::Pow3,
            "pow4" => Token::Pow4,
            "pow5" => Token::Pow5,
            "const" => Token::Const,
            _ => {
                if let Some(idx) = text.strip_prefix('x') {
                    if let Ok(i) = idx.parse::<u8>() {
                        if i >= 1 {
                            return Ok(Token::Var(i));
                        }
                    }
                }
                return parse_numeric_literal(text)
                    .ok_or_else(|| ExprError::UnknownToken { text: text.into() });
            }
        };
        Ok(tok)
    }
}

/// Parses `3`, `-2`, `1/3`, `3.39`, `-0.5` … into an exact rational literal.
fn parse_numeric_literal(text: &str) -> Option<Token> {
    if let Ok(v) = text.parse::<i64>() {
        return Some(Token::Literal(Literal::int(v)));
    }
    if let Some((num, den)) = text.split_once('/') {
        let (n, d) = (num.parse::<i64>().ok()?, den.parse::<i64>().ok()?);
        if d != 0 {
            return Some(Token::Literal(Literal::Rational(Rational64::new(n, d))));
        }
        return None;
    }
    if text.contains('.') {
        // Decimal text becomes an exact base-10 rational: "3.39" = 339/100.
        let neg = text.starts_with('-');
        let digits = text.strip_prefix('-').unwrap_or(text);
        let (int_part, frac_part) = digits.split_once('.')?;
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
            || frac_part.is_empty()
            || frac_part.len() > 15
        {
            return None;
        }
        let mantissa: i64 = format!("{int_part}{frac_part}").parse().ok()?;
        let denom = 10i64.checked_pow(frac_part.len() as u32)?;
        let signed = if neg { -mantissa } else { mantissa };
        return Some(Token::Literal(Literal::Rational(Rational64::new(
            signed, denom,
        ))));
    }
    None
}

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("prefix sequence is incomplete: {missing} more subtree(s) required")]
    IncompleteSequence { missing: usize },
    #[error("prefix sequence complete after {consumed} token(s) but more follow")]
    ExtraTokens { consumed: usize },
    #[error("unknown token `{text}`")]
    UnknownToken { text: String },
    #[error("expression has {expected} constant placeholder(s) but {given} value(s) were supplied")]
    ConstCount { expected: usize, given: usize },
    #[error("variable x{var} out of range for a {d}-column dataset")]
    VariableOutOfRange { var: u8, d: usize },
    #[error("evaluation produced a non-finite output")]
    Invalid,
}

/// A parsed expression node; `children.len() == token.arity()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprNode {
    pub token: Token,
    pub children: Vec<ExprNode>,
}

impl ExprNode {
    pub fn leaf(token: Token) -> Self {
        debug_assert!(token.is_terminal());
        ExprNode {
            token,
            children: Vec::new(),
        }
    }

    pub fn new(token: Token, children: Vec<ExprNode>) -> Self {
        debug_assert_eq!(token.arity(), children.len());
        ExprNode { token, children }
    }
}

/// An expression tree with prefix-order access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprTree {
    pub root: ExprNode,
}

/// Outcome of scanning a prefix token sequence left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    /// Exactly one complete expression.
    Complete,
    /// `missing` more subtrees are still required.
    Needs(usize),
    /// The sequence was complete after `consumed` tokens but more follow.
    ExtraAfter(usize),
}

/// Arity-counter scan: starts with one open slot; each token fills a slot and
/// opens `arity` new ones. The sequence is complete exactly when the counter
/// first returns to zero at the final token.
pub fn completion_state(tokens: &[Token]) -> Completion {
    let mut open: usize = 1;
    for (i, t) in tokens.iter().enumerate() {
        open -= 1;
        open += t.arity();
        if open == 0 {
            return if i + 1 == tokens.len() {
                Completion::Complete
            } else {
                Completion::ExtraAfter(i + 1)
            };
        }
    }
    Completion::Needs(open)
}

impl ExprTree {
    /// Parses a prefix token sequence into a tree.
    pub fn parse_prefix(tokens: &[Token]) -> Result<ExprTree, ExprError> {
        match completion_state(tokens) {
            Completion::Needs(missing) => return Err(ExprError::IncompleteSequence { missing }),
            Completion::ExtraAfter(consumed) => return Err(ExprError::ExtraTokens { consumed }),
            Completion::Complete => {}
        }
        let mut pos = 0usize;
        let root = Self::parse_node(tokens, &mut pos);
        debug_assert_eq!(pos, tokens.len());
        Ok(ExprTree { root })
    }

    fn parse_node(tokens: &[Token], pos: &mut usize) -> ExprNode {
        let token = tokens[*pos];
        *pos += 1;
        let children = (0..token.arity())
            .map(|_| Self::parse_node(tokens, pos))
            .collect();
        ExprNode { token, children }
    }

    /// Parses whitespace-separated prefix text, e.g. `"mul x1 add x2 1"`.
    pub fn parse_prefix_text(text: &str) -> Result<ExprTree, ExprError> {
        let tokens = text
            .split_whitespace()
            .map(Token::from_name)
            .collect::<Result<Vec<_>, _>>()?;
        Self::parse_prefix(&tokens)
    }

    /// Flattens back to prefix token order.
    pub fn to_prefix_tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.len());
        fn walk(n: &ExprNode, out: &mut Vec<Token>) {
            out.push(n.token);
            for c in &n.children {
                walk(c, out);
            }
        }
        walk(&self.root, &mut out);
        out
    }

    pub fn render_prefix(&self) -> String {
        self.to_prefix_tokens()
            .iter()
            .map(|t| t.name())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Number of nodes (= prefix sequence length).
    pub fn len(&self) -> usize {
        fn count(n: &ExprNode) -> usize {
            1 + n.children.iter().map(count).sum::<usize>()
        }
        count(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Weighted structural complexity: the sum of per-token weights.
    pub fn complexity(&self) -> u32 {
        self.to_prefix_tokens()
            .iter()
            .map(Token::complexity_weight)
            .sum()
    }

    /// Number of constant placeholders, in prefix order.
    pub fn const_count(&self) -> usize {
        self.to_prefix_tokens()
            .iter()
            .filter(|t| matches!(t, Token::Const))
            .count()
    }

    /// Distinct variable indices used, ascending.
    pub fn used_vars(&self) -> Vec<u8> {
        let mut vars: Vec<u8> = self
            .to_prefix_tokens()
            .iter()
            .filter_map(|t| match t {
                Token::Var(i) => Some(*i),
                _ => None,
            })
            .collect();
        vars.sort_unstable();
        vars.dedup();
        vars
    }

    /// Replaces each constant placeholder (prefix order) with a float literal.
    pub fn bind_constants(&self, consts: &[f64]) -> Result<ExprTree, ExprError> {
        let expected = self.const_count();
        if consts.len() != expected {
            return Err(ExprError::ConstCount {
                expected,
                given: consts.len(),
            });
        }
        let mut next = 0usize;
        fn walk(n: &ExprNode, consts: &[f64], next: &mut usize) -> ExprNode {
            if matches!(n.token, Token::Const) {
                let v = consts[*next];
                *next += 1;
                return ExprNode::leaf(Token::Literal(Literal::Float(v)));
            }
            ExprNode {
                token: n.token,
                children: n
                    .children
                    .iter()
                    .map(|c| walk(c, consts, next))
                    .collect(),
            }
        }
        let root = walk(&self.root, consts, &mut next);
        Ok(ExprTree { root })
    }

    /// Relabels the used variable set onto the densest prefix `x1..xk`,
    /// preserving order (e.g. `{x3, x7}` becomes `{x1, x2}`).
    pub fn relabel_vars_dense(&self) -> ExprTree {
        let used = self.used_vars();
        let map: std::collections::BTreeMap<u8, u8> = used
            .iter()
            .enumerate()
            .map(|(k, v)| (*v, (k + 1) as u8))
            .collect();
        let mut tree = self.clone();
        fn walk(n: &mut ExprNode, map: &std::collections::BTreeMap<u8, u8>) {
            if let Token::Var(i) = n.token {
                n.token = Token::Var(map[&i]);
            }
            for c in &mut n.children {
                walk(c, map);
            }
        }
        walk(&mut tree.root, &map);
        tree
    }

    /// Rewrites `pow2..pow5` sugar into explicit repeated multiplication, so
    /// the result is expressible in libraries without power tokens.
    pub fn expand_pow_sugar(&self) -> ExprTree {
        fn walk(n: &ExprNode) -> ExprNode {
            let children: Vec<ExprNode> = n.children.iter().map(walk).collect();
            let degree = match n.token {
                Token::Pow2 => 2,
                Token::Pow3 => 3,
                Token::Pow4 => 4,
                Token::Pow5 => 5,
                _ => return ExprNode::new(n.token, children),
            };
            let base = children.into_iter().next().expect("unary child");
            let mut out = base.clone();
            for _ in 1..degree {
                out = ExprNode::new(Token::Mul, vec![base.clone(), out]);
            }
            out
        }
        ExprTree {
            root: walk(&self.root),
        }
    }

    /// Evaluates the tree over each row of `X` (shape n×d).
    ///
    /// `consts` fills constant placeholders in prefix order. The result is
    /// `Invalid` if any final output is NaN or ±Inf; intermediate overflow
    /// that resolves to a finite output (e.g. `1/exp(1000)`) is accepted.
    pub fn evaluate(&self, x: &Array2<f64>, consts: &[f64]) -> Result<Array1<f64>, ExprError> {
        let expected = self.const_count();
        if consts.len() != expected {
            return Err(ExprError::ConstCount {
                expected,
                given: consts.len(),
            });
        }
        let d = x.ncols();
        for v in self.used_vars() {
            if v as usize > d {
                return Err(ExprError::VariableOutOfRange { var: v, d });
            }
        }
        let mut next_const = 0usize;
        let out = eval_node(&self.root, x, consts, &mut next_const);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(ExprError::Invalid)
        }
    }

    /// Nodes in prefix order as `(index, arity)` pairs; used by the genetic
    /// operators to address subtrees.
    pub fn node_count(&self) -> usize {
        self.len()
    }

    /// Returns a clone of the subtree rooted at prefix index `idx`.
    pub fn subtree(&self, idx: usize) -> Option<&ExprNode> {
        fn walk<'a>(n: &'a ExprNode, idx: usize, pos: &mut usize) -> Option<&'a ExprNode> {
            if *pos == idx {
                return Some(n);
            }
            *pos += 1;
            for c in &n.children {
                if let Some(hit) = walk(c, idx, pos) {
                    return Some(hit);
                }
            }
            None
        }
        let mut pos = 0usize;
        walk(&self.root, idx, &mut pos)
    }

    /// Replaces the subtree at prefix index `idx`, returning the new tree.
    pub fn with_subtree(&self, idx: usize, replacement: ExprNode) -> ExprTree {
        fn walk(n: &ExprNode, idx: usize, pos: &mut usize, rep: &ExprNode) -> ExprNode {
            if *pos == idx {
                *pos += n_size(n);
                return rep.clone();
            }
            *pos += 1;
            ExprNode {
                token: n.token,
                children: n
                    .children
                    .iter()
                    .map(|c| walk(c, idx, pos, rep))
                    .collect(),
            }
        }
        fn n_size(n: &ExprNode) -> usize {
            1 + n.children.iter().map(n_size).sum::<usize>()
        }
        let mut pos = 0usize;
        ExprTree {
            root: walk(&self.root, idx, &mut pos, &replacement),
        }
    }

    /// Infix rendering with minimal parentheses, e.g. `x1*(x2 + 1)`.
    pub fn render_infix(&self) -> String {
        render_infix_node(&self.root, 0)
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_infix())
    }
}

fn eval_node(
    n: &ExprNode,
    x: &Array2<f64>,
    consts: &[f64],
    next_const: &mut usize,
) -> Array1<f64> {
    let rows = x.nrows();
    match n.token {
        Token::Var(i) => x.column(i as usize - 1).to_owned(),
        Token::Literal(l) => Array1::from_elem(rows, l.value()),
        Token::Const => {
            let v = consts[*next_const];
            *next_const += 1;
            Array1::from_elem(rows, v)
        }
        token => {
            let a = eval_node(&n.children[0], x, consts, next_const);
            match token {
                Token::Exp => a.mapv(f64::exp),
                Token::Log => a.mapv(f64::ln),
                Token::Sin => a.mapv(f64::sin),
                Token::Cos => a.mapv(f64::cos),
                Token::Sqrt => a.mapv(f64::sqrt),
                Token::Pow2 => a.mapv(|v| v.powi(2)),
                Token::Pow3 => a.mapv(|v| v.powi(3)),
                Token::Pow4 => a.mapv(|v| v.powi(4)),
                Token::Pow5 => a.mapv(|v| v.powi(5)),
                _ => {
                    let b = eval_node(&n.children[1], x, consts, next_const);
                    match token {
                        Token::Add => a + b,
                        Token::Sub => a - b,
                        Token::Mul => a * b,
                        Token::Div => a / b,
                        Token::Pow => {
                            let mut out = a;
                            out.zip_mut_with(&b, |l, r| *l = l.powf(*r));
                            out
                        }
                        _ => unreachable!("arity handled above"),
                    }
                }
            }
        }
    }
}

fn render_infix_node(n: &ExprNode, parent_prec: u8) -> String {
    let (text, prec) = match n.token {
        Token::Add | Token::Sub => {
            let op = if n.token == Token::Add { " + " } else { " - " };
            let l = render_infix_node(&n.children[0], 1);
            // Right operand of `-` binds one level tighter so `a - (b + c)`
            // keeps its parentheses.
            let rp = if n.token == Token::Sub { 2 } else { 1 };
            let r = render_infix_node(&n.children[1], rp);
            (format!("{l}{op}{r}"), 1)
        }
        Token::Mul | Token::Div => {
            let op = if n.token == Token::Mul { "*" } else { "/" };
            let l = render_infix_node(&n.children[0], 2);
            let rp = if n.token == Token::Div { 3 } else { 2 };
            let r = render_infix_node(&n.children[1], rp);
            (format!("{l}{op}{r}"), 2)
        }
        Token::Pow => {
            let l = render_infix_node(&n.children[0], 4);
            let r = render_infix_node(&n.children[1], 4);
            (format!("{l}^{r}"), 3)
        }
        Token::Pow2 | Token::Pow3 | Token::Pow4 | Token::Pow5 => {
            let e = match n.token {
                Token::Pow2 => 2,
                Token::Pow3 => 3,
                Token::Pow4 => 4,
                _ => 5,
            };
            let l = render_infix_node(&n.children[0], 4);
            (format!("{l}^{e}"), 3)
        }
        Token::Exp | Token::Log | Token::Sin | Token::Cos | Token::Sqrt => {
            let inner = render_infix_node(&n.children[0], 0);
            (format!("{}({})", n.token.name(), inner), 4)
        }
        Token::Var(_) | Token::Const => (n.token.name(), 4),
        Token::Literal(l) => {
            let text = n.token.name();
            let negative = match l {
                Literal::Rational(r) => r.is_negative(),
                Literal::Float(v) => v < 0.0,
            };
            let fractional = matches!(l, Literal::Rational(r) if !r.denom().is_zero() && r.denom() != &1);
            if negative || fractional {
                (format!("({text})"), 4)
            } else {
                (text, 4)
            }
        }
    };
    if prec < parent_prec {
        format!("({text})")
    } else {
        text
    }
}
