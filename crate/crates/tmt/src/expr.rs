//! Tiny arithmetic expression evaluator for metric configuration.
//!
//! Grammar: `+ - * / ^`, unary minus, parentheses, the variables `x1`, `x2`
//! and the functions `exp`, `sin`, `cos`. Used for the conformal factor
//! `lambda_expr` in metric specs.

use crate::{Result, TmtError};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    X1,
    X2,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Exp(Box<Node>),
    Sin(Box<Node>),
    Cos(Box<Node>),
}

/// A parsed expression in the chart coordinates `x1`, `x2`.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    src: String,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, src };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.err("trailing input"));
        }
        Ok(Expr {
            root,
            src: src.to_string(),
        })
    }

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        eval_node(&self.root, x1, x2)
    }

    pub fn source(&self) -> &str {
        &self.src
    }
}

fn eval_node(n: &Node, x1: f64, x2: f64) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::X1 => x1,
        Node::X2 => x2,
        Node::Neg(a) => -eval_node(a, x1, x2),
        Node::Add(a, b) => eval_node(a, x1, x2) + eval_node(b, x1, x2),
        Node::Sub(a, b) => eval_node(a, x1, x2) - eval_node(b, x1, x2),
        Node::Mul(a, b) => eval_node(a, x1, x2) * eval_node(b, x1, x2),
        Node::Div(a, b) => eval_node(a, x1, x2) / eval_node(b, x1, x2),
        Node::Pow(a, b) => eval_node(a, x1, x2).powf(eval_node(b, x1, x2)),
        Node::Exp(a) => eval_node(a, x1, x2).exp(),
        Node::Sin(a) => eval_node(a, x1, x2).sin(),
        Node::Cos(a) => eval_node(a, x1, x2).cos(),
    }
}

#[derive(Debug, Clone, PartialEq)]
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
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let bytes: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' | '\n' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' | '\u{2212}' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            _ if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == '.'
                        || bytes[i] == 'e'
                        || bytes[i] == 'E'
                        || ((bytes[i] == '+' || bytes[i] == '-')
                            && i > start
                            && (bytes[i - 1] == 'e' || bytes[i - 1] == 'E')))
                {
                    i += 1;
                }
                let s: String = bytes[start..i].iter().collect();
                let v = s.parse::<f64>().map_err(|_| {
                    TmtError::Argument(format!("bad number `{s}` in expression `{src}`"))
                })?;
                out.push(Tok::Num(v));
            }
            _ if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Ident(bytes[start..i].iter().collect()));
            }
            _ => {
                return Err(TmtError::Argument(format!(
                    "unexpected character `{c}` in expression `{src}`"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> TmtError {
        TmtError::Argument(format!("expression `{}`: {msg}", self.src))
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some(Tok::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    // Right-associative `^` binding tighter than unary minus on its left arm.
    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Node::Const(v)),
            Some(Tok::Ident(name)) => match name.as_str() {
                "x1" => Ok(Node::X1),
                "x2" => Ok(Node::X2),
                "exp" | "sin" | "cos" => {
                    match self.next() {
                        Some(Tok::LParen) => {}
                        _ => return Err(self.err("expected `(` after function name")),
                    }
                    let arg = self.expr()?;
                    match self.next() {
                        Some(Tok::RParen) => {}
                        _ => return Err(self.err("expected `)`")),
                    }
                    Ok(match name.as_str() {
                        "exp" => Node::Exp(Box::new(arg)),
                        "sin" => Node::Sin(Box::new(arg)),
                        _ => Node::Cos(Box::new(arg)),
                    })
                }
                other => Err(self.err(&format!("unknown identifier `{other}`"))),
            },
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => Err(self.err("expected `)`")),
                }
            }
            _ => Err(self.err("unexpected end of expression")),
        }
    }
}
