//! Scalar expressions of time `t` and parameter components `b1 … bd`.
//!
//! Matrix entries of a system (`A(t,β)`, `B(t,β)`, `G(t,β)`) and its boundary
//! states are written as small infix expressions such as `-sin(b*t)` or
//! `-b^2`. This module parses them into an immutable AST and evaluates the AST
//! in IEEE double precision.
//!
//! Grammar, loosest to tightest binding:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          right-associative
//! primary := number | 't' | 'b' | 'b'<k> | 'pi' | func '(' expr ')' | '(' expr ')'
//! func    := sin | cos | exp | sqrt | abs
//! ```
//!
//! `^` binds tighter than unary minus, so `-b^2` is `-(b^2)`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {position}: expected {expected}")]
    Syntax { position: usize, expected: &'static str },
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("parameter index b{index} out of range (parameter dimension is {dim})")]
    ParamIndexOutOfRange { index: usize, dim: usize },
    #[error("expression evaluated to a non-finite value ({0})")]
    NonFiniteResult(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
            BinaryOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Function {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

impl Function {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Function::Sin,
            "cos" => Function::Cos,
            "exp" => Function::Exp,
            "sqrt" => Function::Sqrt,
            "abs" => Function::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Function::Sin => "sin",
            Function::Cos => "cos",
            Function::Exp => "exp",
            Function::Sqrt => "sqrt",
            Function::Abs => "abs",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Function::Sin => x.sin(),
            Function::Cos => x.cos(),
            Function::Exp => x.exp(),
            Function::Sqrt => x.sqrt(),
            Function::Abs => x.abs(),
        }
    }
}

/// Parsed expression tree. Parameter indices are zero-based internally and
/// printed one-based (`b1`, `b2`, …).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    Time,
    Param(usize),
    Neg(Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call(Function, Box<Expr>),
}

impl Expr {
    pub fn parse(source: &str, param_dim: usize) -> Result<Expr, ExprError> {
        let mut parser = Parser {
            src: source.as_bytes(),
            pos: 0,
            param_dim,
        };
        parser.skip_ws();
        if parser.at_end() {
            return Err(ExprError::Syntax {
                position: 0,
                expected: "expression",
            });
        }
        let expr = parser.expr()?;
        parser.skip_ws();
        if !parser.at_end() {
            return Err(ExprError::Syntax {
                position: parser.pos,
                expected: "operator or end of input",
            });
        }
        Ok(expr)
    }

    pub fn constant(value: f64) -> Expr {
        Expr::Num(value)
    }

    /// Evaluate at `(t, β)`. Non-finite results propagate; use
    /// [`Expr::eval_strict`] to reject them.
    pub fn eval(&self, t: f64, beta: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Pi => std::f64::consts::PI,
            Expr::Time => t,
            Expr::Param(i) => beta[*i],
            Expr::Neg(e) => -e.eval(t, beta),
            Expr::Call(f, e) => f.apply(e.eval(t, beta)),
            Expr::Binary(op, l, r) => {
                let a = l.eval(t, beta);
                let b = r.eval(t, beta);
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => a / b,
                    BinaryOp::Pow => power(a, b),
                }
            }
        }
    }

    pub fn eval_strict(&self, t: f64, beta: &[f64]) -> Result<f64, ExprError> {
        let v = self.eval(t, beta);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFiniteResult(v))
        }
    }

    pub fn depends_on_time(&self) -> bool {
        match self {
            Expr::Time => true,
            Expr::Num(_) | Expr::Pi | Expr::Param(_) => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.depends_on_time(),
            Expr::Binary(_, l, r) => l.depends_on_time() || r.depends_on_time(),
        }
    }

    /// Largest parameter index referenced (one-based), or 0 when none.
    pub fn max_param_index(&self) -> usize {
        match self {
            Expr::Param(i) => i + 1,
            Expr::Num(_) | Expr::Pi | Expr::Time => 0,
            Expr::Neg(e) | Expr::Call(_, e) => e.max_param_index(),
            Expr::Binary(_, l, r) => l.max_param_index().max(r.max_param_index()),
        }
    }
}

// Integer exponents go through powi; a negative base with a fractional
// exponent yields NaN, which strict evaluation rejects.
fn power(base: f64, exponent: f64) -> f64 {
    if exponent.fract() == 0.0 && exponent.abs() <= i32::MAX as f64 {
        base.powi(exponent as i32)
    } else if base < 0.0 {
        f64::NAN
    } else {
        base.powf(exponent)
    }
}

/// Fully parenthesized form that reparses to an identical tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Pi => f.write_str("pi"),
            Expr::Time => f.write_str("t"),
            Expr::Param(i) => write!(f, "b{}", i + 1),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    param_dim: usize,
}

impl Parser<'_> {
    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8, expected: &'static str) -> Result<(), ExprError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(ExprError::Syntax {
                position: self.pos,
                expected,
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat(b'+') {
                BinaryOp::Add
            } else if self.eat(b'-') {
                BinaryOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat(b'*') {
                BinaryOp::Mul
            } else if self.eat(b'/') {
                BinaryOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat(b'^') {
            let exponent = self.unary()?;
            Ok(Expr::Binary(BinaryOp::Pow, Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')', "`)`")?;
                Ok(inner)
            }
            _ => Err(ExprError::Syntax {
                position: self.pos,
                expected: "number, identifier or `(`",
            }),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.') {
            self.pos += 1;
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // not an exponent after all
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
        text.parse::<f64>().map(Expr::Num).map_err(|_| ExprError::Syntax {
            position: start,
            expected: "numeric literal",
        })
    }

    fn identifier(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
        if let Some(func) = Function::from_name(name) {
            self.expect(b'(', "`(` after function name")?;
            let arg = self.expr()?;
            self.expect(b')', "`)`")?;
            return Ok(Expr::Call(func, Box::new(arg)));
        }
        match name {
            "t" => Ok(Expr::Time),
            "pi" => Ok(Expr::Pi),
            "b" if self.param_dim == 1 => Ok(Expr::Param(0)),
            _ => self.param(name),
        }
    }

    fn param(&self, name: &str) -> Result<Expr, ExprError> {
        let digits = name
            .strip_prefix('b')
            .filter(|d| !d.is_empty() && d.bytes().all(|c| c.is_ascii_digit()))
            .ok_or_else(|| ExprError::UnknownIdentifier(name.to_string()))?;
        let index: usize = digits
            .parse()
            .map_err(|_| ExprError::UnknownIdentifier(name.to_string()))?;
        if index == 0 || index > self.param_dim {
            return Err(ExprError::ParamIndexOutOfRange {
                index,
                dim: self.param_dim,
            });
        }
        Ok(Expr::Param(index - 1))
    }
}
