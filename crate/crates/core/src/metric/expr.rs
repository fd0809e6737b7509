//! Derived-metric expression language.
//!
//! ```text
//! expr       := comparison
//! comparison := additive ( ("<" | "<=" | ">" | ">=" | "==") additive )*
//! additive   := product ( ("+" | "-") product )*
//! product    := unary ( ("*" | "/") unary )*
//! unary      := "-" unary | primary
//! primary    := number | "(" expr ")" | call | metric_ref
//! metric_ref := name [ "@" kind ]
//! call       := "avg_over_time" "(" expr "," duration ")"
//!             | "rate" "(" metric_ref "," duration ")"
//!             | ("sum" | "min" | "max" | "avg") "(" metric_ref "@" kind ")"
//! ```

use std::collections::BTreeSet;
use std::fmt;

use crate::entity::{parse_duration, Kind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at column {column}: {message}")]
pub struct ParseError {
    /// 1-based character column; one past the end for unexpected end of input.
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFn {
    Sum,
    Min,
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricRef {
    pub name: String,
    pub child_kind: Option<Kind>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Metric(MetricRef),
    Neg(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    AvgOverTime {
        inner: Box<Expr>,
        window: i64,
    },
    Rate {
        metric: MetricRef,
        window: i64,
    },
    Aggregate {
        func: AggFn,
        metric: MetricRef,
    },
}

impl Expr {
    /// Raw metric names referenced anywhere in the expression.
    pub fn base_metrics(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| match e {
            Expr::Metric(m) | Expr::Rate { metric: m, .. } | Expr::Aggregate { metric: m, .. } => {
                out.insert(m.name.clone());
            }
            _ => {}
        });
        out
    }

    /// Longest time window the expression looks back over.
    pub fn max_window(&self) -> i64 {
        let mut max = 0;
        self.visit(&mut |e| match e {
            Expr::AvgOverTime { window, .. } | Expr::Rate { window, .. } => {
                max = max.max(*window)
            }
            _ => {}
        });
        max
    }

    fn visit(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Neg(inner) | Expr::AvgOverTime { inner, .. } => inner.visit(f),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.visit(f);
                rhs.visit(f);
            }
            _ => {}
        }
    }

    /// Checks that child references are aggregated and point below `scope`.
    pub fn type_check(&self, scope: Kind) -> Result<(), String> {
        match self {
            Expr::Number(_) => Ok(()),
            Expr::Metric(m) => match m.child_kind {
                Some(kind) => Err(format!(
                    "`{}@{kind}` refers to many series and must be aggregated",
                    m.name
                )),
                None => Ok(()),
            },
            Expr::Neg(inner) => inner.type_check(scope),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.type_check(scope)?;
                rhs.type_check(scope)
            }
            Expr::AvgOverTime { inner, .. } => inner.type_check(scope),
            Expr::Rate { metric, .. } => match metric.child_kind {
                Some(_) => Err(format!("rate over `{}` takes an unsuffixed metric", metric.name)),
                None => Ok(()),
            },
            Expr::Aggregate { metric, .. } => match metric.child_kind {
                None => Err(format!(
                    "aggregation over `{}` requires a @child_kind suffix",
                    metric.name
                )),
                Some(kind) if !scope.is_ancestor_of(kind) => Err(format!(
                    "`{kind}` is not below scope `{scope}`"
                )),
                Some(_) => Ok(()),
            },
        }
    }
}

impl fmt::Display for MetricRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.child_kind {
            Some(kind) => write!(f, "{}@{kind}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(n) => write!(f, "{n}"),
            Expr::Metric(m) => write!(f, "{m}"),
            Expr::Neg(inner) => write!(f, "-({inner})"),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::AvgOverTime { inner, window } => {
                write!(f, "avg_over_time({inner}, {window}ns)")
            }
            Expr::Rate { metric, window } => write!(f, "rate({metric}, {window}ns)"),
            Expr::Aggregate { func, metric } => {
                let name = match func {
                    AggFn::Sum => "sum",
                    AggFn::Min => "min",
                    AggFn::Max => "max",
                    AggFn::Avg => "avg",
                };
                write!(f, "{name}({metric})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    Duration(i64),
    Ident(String),
    Op(BinOp),
    At,
    LParen,
    RParen,
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    column: usize,
}

fn err(column: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        column,
        message: message.into(),
    }
}

fn lex(source: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            '@' => Some(Tok::At),
            '+' => Some(Tok::Op(BinOp::Add)),
            '-' => Some(Tok::Op(BinOp::Sub)),
            '*' => Some(Tok::Op(BinOp::Mul)),
            '/' => Some(Tok::Op(BinOp::Div)),
            _ => None,
        };
        if let Some(tok) = single {
            tokens.push(Token { tok, column });
            i += 1;
            continue;
        }
        if matches!(c, '<' | '>' | '=') {
            let eq_next = chars.get(i + 1) == Some(&'=');
            let (op, width) = match (c, eq_next) {
                ('<', true) => (BinOp::Le, 2),
                ('<', false) => (BinOp::Lt, 1),
                ('>', true) => (BinOp::Ge, 2),
                ('>', false) => (BinOp::Gt, 1),
                ('=', true) => (BinOp::Eq, 2),
                _ => return Err(err(column, "expected `==`")),
            };
            tokens.push(Token {
                tok: Tok::Op(op),
                column,
            });
            i += width;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // Exponent, e.g. 1e6 or 2.5E-3.
            if i < chars.len() && matches!(chars[i], 'e' | 'E') {
                let mut j = i + 1;
                if j < chars.len() && matches!(chars[j], '+' | '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let number: String = chars[start..i].iter().collect();
            let unit_start = i;
            while i < chars.len() && chars[i].is_ascii_alphabetic() {
                i += 1;
            }
            if unit_start < i {
                let text: String = chars[start..i].iter().collect();
                let nanos = parse_duration(&text)
                    .ok_or_else(|| err(column, format!("invalid duration `{text}`")))?;
                tokens.push(Token {
                    tok: Tok::Duration(nanos),
                    column,
                });
            } else {
                let value: f64 = number
                    .parse()
                    .map_err(|_| err(column, format!("invalid number `{number}`")))?;
                tokens.push(Token {
                    tok: Tok::Number(value),
                    column,
                });
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                column,
            });
            continue;
        }
        return Err(err(column, format!("unexpected character `{c}`")));
    }
    tokens.push(Token {
        tok: Tok::End,
        column: chars.len() + 1,
    });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let token = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        token
    }

    fn unexpected(&self, what: &str) -> ParseError {
        let token = self.peek();
        let found = match &token.tok {
            Tok::End => "end of input".to_string(),
            other => format!("{other:?}"),
        };
        err(token.column, format!("expected {what}, found {found}"))
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek().tok == tok {
            self.next();
            Ok(())
        } else {
            Err(self.unexpected(what))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.additive()?;
        while let Tok::Op(op @ (BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq)) =
            self.peek().tok
        {
            self.next();
            let rhs = self.additive()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        while let Tok::Op(op @ (BinOp::Add | BinOp::Sub)) = self.peek().tok {
            self.next();
            let rhs = self.product()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(op @ (BinOp::Mul | BinOp::Div)) = self.peek().tok {
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek().tok == Tok::Op(BinOp::Sub) {
            self.next();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().tok.clone() {
            Tok::Number(n) => {
                self.next();
                Ok(Expr::Number(n))
            }
            Tok::LParen => {
                self.next();
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let column = self.peek().column;
                self.next();
                if self.peek().tok == Tok::LParen {
                    self.next();
                    self.call(&name, column)
                } else {
                    self.metric_suffix(name)
                }
            }
            _ => Err(self.unexpected("an expression")),
        }
    }

    fn metric_suffix(&mut self, name: String) -> Result<Expr, ParseError> {
        let metric = self.finish_metric_ref(name)?;
        Ok(Expr::Metric(metric))
    }

    fn finish_metric_ref(&mut self, name: String) -> Result<MetricRef, ParseError> {
        let child_kind = if self.peek().tok == Tok::At {
            self.next();
            let column = self.peek().column;
            match self.next().tok {
                Tok::Ident(kind) => Some(
                    kind.parse::<Kind>()
                        .map_err(|e| err(column, e.to_string()))?,
                ),
                _ => return Err(err(column, "expected a resource type after `@`")),
            }
        } else {
            None
        };
        Ok(MetricRef { name, child_kind })
    }

    fn metric_ref(&mut self) -> Result<MetricRef, ParseError> {
        match self.peek().tok.clone() {
            Tok::Ident(name) => {
                self.next();
                self.finish_metric_ref(name)
            }
            _ => Err(self.unexpected("a metric name")),
        }
    }

    fn duration(&mut self) -> Result<i64, ParseError> {
        match self.peek().tok {
            Tok::Duration(nanos) if nanos > 0 => {
                self.next();
                Ok(nanos)
            }
            _ => Err(self.unexpected("a positive duration such as `10s`")),
        }
    }

    fn call(&mut self, name: &str, column: usize) -> Result<Expr, ParseError> {
        let expr = match name {
            "avg_over_time" => {
                let inner = self.expr()?;
                self.expect(Tok::Comma, "`,`")?;
                let window = self.duration()?;
                Expr::AvgOverTime {
                    inner: Box::new(inner),
                    window,
                }
            }
            "rate" => {
                let metric = self.metric_ref()?;
                self.expect(Tok::Comma, "`,`")?;
                let window = self.duration()?;
                Expr::Rate { metric, window }
            }
            "sum" | "min" | "max" | "avg" => {
                let func = match name {
                    "sum" => AggFn::Sum,
                    "min" => AggFn::Min,
                    "max" => AggFn::Max,
                    _ => AggFn::Avg,
                };
                let metric = self.metric_ref()?;
                Expr::Aggregate { func, metric }
            }
            other => return Err(err(column, format!("unknown function `{other}`"))),
        };
        self.expect(Tok::RParen, "`)`")?;
        Ok(expr)
    }
}

pub fn parse(source: &str) -> Result<Expr, ParseError> {
    let mut parser = Parser {
        tokens: lex(source)?,
        pos: 0,
    };
    let expr = parser.expr()?;
    if parser.peek().tok != Tok::End {
        return Err(parser.unexpected("end of input"));
    }
    Ok(expr)
}
