//! A small arithmetic language for sampling densities.
//!
//! Variables are `x1, x2, ...` (1-based coordinates; `x`, `y`, `z` alias the
//! first three). Supported: numbers, `+ - * / ^`, parentheses, the constants
//! `pi` and `e`, and the functions `exp ln sqrt abs sin cos tan tanh min max
//! step`, where `step(s)` is 1 for `s >= 0` and 0 otherwise.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Tan,
    Tanh,
    Min,
    Max,
    Step,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "exp" => (Func::Exp, 1),
            "ln" | "log" => (Func::Ln, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "sin" => (Func::Sin, 1),
            "cos" => (Func::Cos, 1),
            "tan" => (Func::Tan, 1),
            "tanh" => (Func::Tanh, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            "step" => (Func::Step, 1),
            _ => return None,
        })
    }
}

/// A parsed density `f(x1, ..., xn)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityExpr {
    root: Node,
    source: String,
    max_var: usize,
}

impl DensityExpr {
    pub fn parse(source: &str) -> Result<Self> {
        let mut p = Parser { src: source.as_bytes(), pos: 0, max_var: 0 };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(DensityExpr { root, source: source.to_string(), max_var: p.max_var })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Number of coordinates the expression refers to.
    pub fn arity(&self) -> usize {
        self.max_var
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        eval(&self.root, x)
    }
}

fn eval(node: &Node, x: &[f64]) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var(i) => x.get(*i).copied().unwrap_or(f64::NAN),
        Node::Neg(a) => -eval(a, x),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, x), eval(b, x));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => a.powf(b),
            }
        }
        Node::Call(f, args) => {
            let a = eval(&args[0], x);
            match f {
                Func::Exp => a.exp(),
                Func::Ln => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => a.tan(),
                Func::Tanh => a.tanh(),
                Func::Min => a.min(eval(&args[1], x)),
                Func::Max => a.max(eval(&args[1], x)),
                Func::Step => {
                    if a >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    max_var: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::InvalidExpression { message: message.to_string(), position: self.pos }
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

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => Op::Add,
                Some(b'-') => Op::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => Op::Mul,
                Some(b'/') => Op::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.src.len() && (self.src[self.pos] == b'e' || self.src[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        text.parse::<f64>()
            .map(Node::Num)
            .map_err(|_| Error::InvalidExpression { message: format!("bad number `{text}`"), position: start })
    }

    fn identifier(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
        if let Some((func, arity)) = Func::lookup(name) {
            if !self.eat(b'(') {
                return Err(self.error("expected '(' after function name"));
            }
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(self.error("expected ')'"));
            }
            if args.len() != arity {
                return Err(Error::InvalidExpression {
                    message: format!("`{name}` takes {arity} argument(s)"),
                    position: start,
                });
            }
            return Ok(Node::Call(func, args));
        }
        let var = match name {
            "pi" => return Ok(Node::Num(std::f64::consts::PI)),
            "e" => return Ok(Node::Num(std::f64::consts::E)),
            "x" => Some(0),
            "y" => Some(1),
            "z" => Some(2),
            _ => name.strip_prefix('x').and_then(|k| k.parse::<usize>().ok()).filter(|&k| k >= 1).map(|k| k - 1),
        };
        match var {
            Some(i) => {
                self.max_var = self.max_var.max(i + 1);
                Ok(Node::Var(i))
            }
            None => Err(Error::InvalidExpression { message: format!("unknown identifier `{name}`"), position: start }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: &[f64]) -> f64 {
        DensityExpr::parse(s).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", &[]), 7.0);
        assert_eq!(ev("(1 + 2) * 3", &[]), 9.0);
        assert_eq!(ev("2 ^ 3 ^ 2", &[]), 512.0);
        assert_eq!(ev("-2 ^ 2", &[]), -4.0);
        assert_eq!(ev("1 / 2", &[]), 0.5);
        assert_eq!(ev("8 - 3 - 2", &[]), 3.0);
    }

    #[test]
    fn variables_and_functions() {
        assert_eq!(ev("x1 * x2 + x", &[2.0, 3.0]), 8.0);
        assert_eq!(ev("step(x1 - 0.5) * max(x2, 1)", &[0.7, 0.2]), 1.0);
        assert!((ev("exp(-(x^2 + y^2))", &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(ev("1.5e1", &[]), 15.0);
        assert_eq!(DensityExpr::parse("x3 + 1").unwrap().arity(), 3);
    }

    #[test]
    fn errors_carry_positions() {
        assert!(matches!(DensityExpr::parse("1 +"), Err(Error::InvalidExpression { position: 3, .. })));
        assert!(matches!(DensityExpr::parse("foo(1)"), Err(Error::InvalidExpression { position: 0, .. })));
        assert!(DensityExpr::parse("max(1)").is_err());
        assert!(DensityExpr::parse("(1").is_err());
        assert!(DensityExpr::parse("x0").is_err());
    }
}
