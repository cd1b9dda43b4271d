//! A small arithmetic expression language for custom drivers and payoffs.
//!
//! Grammar (usual precedence, left-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | atom
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `max(a,b)`, `min(a,b)`, `abs(a)`, `exp(a)`. Identifiers are
//! bound at parse time against a caller-supplied variable list (drivers use
//! `t, y, z, kappa`; payoffs use `s1, s2, t`).

use crate::error::Error;

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Max(Box<Node>, Box<Node>),
    Min(Box<Node>, Box<Node>),
    Abs(Box<Node>),
    Exp(Box<Node>),
}

/// A compiled expression over a fixed variable environment.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    source: String,
    arity: usize,
}

impl Expr {
    /// Parses `source` with the given variable names (position = slot in the
    /// `eval` environment).
    pub fn parse(source: &str, variables: &[&str]) -> Result<Expr, Error> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens: &tokens, pos: 0, variables, source };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "unexpected trailing input in expression {source:?}"
            )));
        }
        Ok(Expr { root, source: source.to_string(), arity: variables.len() })
    }

    pub fn eval(&self, env: &[f64]) -> f64 {
        debug_assert_eq!(env.len(), self.arity);
        eval_node(&self.root, env)
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

fn eval_node(node: &Node, env: &[f64]) -> f64 {
    match node {
        Node::Const(c) => *c,
        Node::Var(i) => env[*i],
        Node::Neg(a) => -eval_node(a, env),
        Node::Add(a, b) => eval_node(a, env) + eval_node(b, env),
        Node::Sub(a, b) => eval_node(a, env) - eval_node(b, env),
        Node::Mul(a, b) => eval_node(a, env) * eval_node(b, env),
        Node::Div(a, b) => eval_node(a, env) / eval_node(b, env),
        Node::Max(a, b) => eval_node(a, env).max(eval_node(b, env)),
        Node::Min(a, b) => eval_node(a, env).min(eval_node(b, env)),
        Node::Abs(a) => eval_node(a, env).abs(),
        Node::Exp(a) => eval_node(a, env).exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
}

fn tokenize(s: &str) -> Result<Vec<Token>, Error> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, '0'..='9' | '.' | 'e' | 'E')
                {
                    // Accept exponent signs directly after e/E.
                    if matches!(bytes[i] as char, 'e' | 'E')
                        && i + 1 < bytes.len()
                        && matches!(bytes[i + 1] as char, '+' | '-')
                    {
                        i += 1;
                    }
                    i += 1;
                }
                let text = &s[start..i];
                let value: f64 = text.parse().map_err(|_| {
                    Error::InvalidInput(format!("bad numeric literal {text:?} in expression"))
                })?;
                out.push(Token::Num(value));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'a'..='z' | 'A'..='Z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push(Token::Ident(s[start..i].to_string()));
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unexpected character {other:?} in expression"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    variables: &'a [&'a str],
    source: &'a str,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Token) -> Result<(), Error> {
        match self.bump() {
            Some(t) if t == want => Ok(()),
            other => Err(Error::InvalidInput(format!(
                "expected {want:?}, found {other:?} in expression {:?}",
                self.source
            ))),
        }
    }

    fn expr(&mut self) -> Result<Node, Error> {
        let mut node = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    node = Node::Add(Box::new(node), Box::new(self.term()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    node = Node::Sub(Box::new(node), Box::new(self.term()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn term(&mut self) -> Result<Node, Error> {
        let mut node = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    node = Node::Mul(Box::new(node), Box::new(self.unary()?));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    node = Node::Div(Box::new(node), Box::new(self.unary()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn unary(&mut self) -> Result<Node, Error> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node, Error> {
        match self.bump() {
            Some(Token::Num(v)) => Ok(Node::Const(v)),
            Some(Token::LParen) => {
                let inner = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            Some(Token::Ident(name)) => {
                if matches!(self.peek(), Some(Token::LParen)) {
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while matches!(self.peek(), Some(Token::Comma)) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(Token::RParen)?;
                    self.call(&name, args)
                } else if let Some(slot) =
                    self.variables.iter().position(|v| *v == name.as_str())
                {
                    Ok(Node::Var(slot))
                } else {
                    Err(Error::InvalidInput(format!(
                        "unknown variable {name:?} in expression {:?} (expected one of {:?})",
                        self.source, self.variables
                    )))
                }
            }
            other => Err(Error::InvalidInput(format!(
                "unexpected token {other:?} in expression {:?}",
                self.source
            ))),
        }
    }

    fn call(&self, name: &str, mut args: Vec<Node>) -> Result<Node, Error> {
        let want = match name {
            "max" | "min" => 2,
            "abs" | "exp" => 1,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown function {other:?} in expression {:?}",
                    self.source
                )))
            }
        };
        if args.len() != want {
            return Err(Error::InvalidInput(format!(
                "{name} takes {want} argument(s), got {} in expression {:?}",
                args.len(),
                self.source
            )));
        }
        let second = if want == 2 { Some(Box::new(args.pop().unwrap())) } else { None };
        let first = Box::new(args.pop().unwrap());
        Ok(match name {
            "max" => Node::Max(first, second.unwrap()),
            "min" => Node::Min(first, second.unwrap()),
            "abs" => Node::Abs(first),
            _ => Node::Exp(first),
        })
    }
}
