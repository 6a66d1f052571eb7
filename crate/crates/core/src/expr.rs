//! Scalar expressions in two variables.
//!
//! Used for operator coefficients, data functions and arc parameterizations.
//! Variables are positional (`Var(0)`, `Var(1)`); their names are chosen at
//! parse time, `x`/`y` by default.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { name: String, offset: usize },
    #[error("function `{func}` takes {expected} argument(s), got {got}")]
    Arity {
        func: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("evaluation error in `{op}`: {reason}")]
    Domain { op: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Atan2,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "atan2" => Func::Atan2,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Atan2 => "atan2",
        }
    }

    pub fn arity(self) -> usize {
        if self == Func::Atan2 {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

pub const XY: [&str; 2] = ["x", "y"];

fn check(op: &'static str, v: f64) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ExprError::Domain {
            op,
            reason: "non-finite result",
        })
    }
}

/// Integer exponent if `e` is an integral literal of moderate size.
fn literal_int(e: &Expr) -> Option<i32> {
    match e {
        Expr::Num(n) if n.fract() == 0.0 && n.abs() <= 64.0 => Some(*n as i32),
        _ => None,
    }
}

fn int_pow(base: f64, n: i32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..n.unsigned_abs() {
        acc *= base;
    }
    if n < 0 {
        1.0 / acc
    } else {
        acc
    }
}

impl Expr {
    /// Parses with variables named `x` and `y`.
    pub fn parse(text: &str) -> Result<Expr, ExprError> {
        Self::parse_with(text, &XY)
    }

    /// Parses with custom variable names; `names[i]` becomes `Var(i)`.
    pub fn parse_with(text: &str, names: &[&str]) -> Result<Expr, ExprError> {
        let mut p = Parser {
            src: text,
            pos: 0,
            names,
        };
        p.skip_ws();
        if p.pos >= text.len() {
            return Err(ExprError::Syntax {
                offset: 0,
                msg: "empty expression".into(),
            });
        }
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < text.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(0) => x,
            Expr::Var(_) => y,
            Expr::Neg(a) => -a.eval(x, y)?,
            Expr::Add(a, b) => check("add", a.eval(x, y)? + b.eval(x, y)?)?,
            Expr::Sub(a, b) => check("sub", a.eval(x, y)? - b.eval(x, y)?)?,
            Expr::Mul(a, b) => check("mul", a.eval(x, y)? * b.eval(x, y)?)?,
            Expr::Div(a, b) => {
                let d = b.eval(x, y)?;
                if d == 0.0 {
                    return Err(ExprError::Domain {
                        op: "div",
                        reason: "division by zero",
                    });
                }
                check("div", a.eval(x, y)? / d)?
            }
            Expr::Pow(a, b) => {
                let base = a.eval(x, y)?;
                if let Some(n) = literal_int(b) {
                    if n < 0 && base == 0.0 {
                        return Err(ExprError::Domain {
                            op: "pow",
                            reason: "zero to a negative power",
                        });
                    }
                    check("pow", int_pow(base, n))?
                } else {
                    let ex = b.eval(x, y)?;
                    if base < 0.0 && ex.fract() != 0.0 {
                        return Err(ExprError::Domain {
                            op: "pow",
                            reason: "negative base with non-integer exponent",
                        });
                    }
                    check("pow", base.powf(ex))?
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x, y)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => check("exp", a.exp())?,
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(ExprError::Domain {
                                op: "log",
                                reason: "non-positive argument",
                            });
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(ExprError::Domain {
                                op: "sqrt",
                                reason: "negative argument",
                            });
                        }
                        a.sqrt()
                    }
                    Func::Abs => a.abs(),
                    Func::Atan2 => a.atan2(args[1].eval(x, y)?),
                }
            }
        })
    }

    /// True if the expression does not depend on any variable.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) => a.is_constant(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.is_constant() && b.is_constant(),
            Expr::Call(_, args) => args.iter().all(Expr::is_constant),
        }
    }

    /// Symbolic derivative with respect to `Var(var)`.
    pub fn diff(&self, var: usize) -> Expr {
        use Expr::*;
        match self {
            Num(_) => Num(0.0),
            Var(i) => Num(if *i == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.diff(var)),
            Add(a, b) => add(a.diff(var), b.diff(var)),
            Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Mul(a, b) => add(
                mul(a.diff(var), (**b).clone()),
                mul((**a).clone(), b.diff(var)),
            ),
            Div(a, b) => sub(
                div(a.diff(var), (**b).clone()),
                div(
                    mul((**a).clone(), b.diff(var)),
                    mul((**b).clone(), (**b).clone()),
                ),
            ),
            Pow(a, b) => {
                if b.is_constant() {
                    // d(a^n) = n a^(n-1) a'
                    let nm1 = sub((**b).clone(), Num(1.0));
                    mul(
                        mul((**b).clone(), pow((**a).clone(), nm1)),
                        a.diff(var),
                    )
                } else {
                    // d(a^b) = a^b (b' ln a + b a'/a)
                    mul(
                        self.clone(),
                        add(
                            mul(b.diff(var), call1(Func::Log, (**a).clone())),
                            div(mul((**b).clone(), a.diff(var)), (**a).clone()),
                        ),
                    )
                }
            }
            Call(f, args) => {
                let a = &args[0];
                let da = a.diff(var);
                match f {
                    Func::Sin => mul(call1(Func::Cos, a.clone()), da),
                    Func::Cos => neg(mul(call1(Func::Sin, a.clone()), da)),
                    Func::Exp => mul(self.clone(), da),
                    Func::Log => div(da, a.clone()),
                    Func::Sqrt => div(da, mul(Num(2.0), self.clone())),
                    Func::Abs => div(mul(da, a.clone()), self.clone()),
                    Func::Atan2 => {
                        // atan2(a, b): (b a' - a b') / (a^2 + b^2)
                        let b = &args[1];
                        let db = b.diff(var);
                        div(
                            sub(mul(b.clone(), da), mul(a.clone(), db)),
                            add(mul(a.clone(), a.clone()), mul(b.clone(), b.clone())),
                        )
                    }
                }
            }
        }
    }

    /// Replaces `Var(var)` by `with`.
    pub fn substitute(&self, var: usize, with: &Expr) -> Expr {
        use Expr::*;
        let s = |e: &Expr| e.substitute(var, with);
        match self {
            Num(v) => Num(*v),
            Var(i) if *i == var => with.clone(),
            Var(i) => Var(*i),
            Neg(a) => neg(s(a)),
            Add(a, b) => add(s(a), s(b)),
            Sub(a, b) => sub(s(a), s(b)),
            Mul(a, b) => mul(s(a), s(b)),
            Div(a, b) => div(s(a), s(b)),
            Pow(a, b) => pow(s(a), s(b)),
            Call(f, args) => Call(*f, args.iter().map(s).collect()),
        }
    }

    /// Printable form with the given variable names.
    pub fn display_with<'a>(&'a self, names: &'a [&'a str]) -> Display<'a> {
        Display { e: self, names }
    }

    fn level(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

// Smart constructors with literal folding.

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        a => Expr::Neg(Box::new(a)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        (Expr::Num(0.0), e) | (e, Expr::Num(0.0)) => e,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        (e, Expr::Num(0.0)) => e,
        (Expr::Num(0.0), e) => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        (Expr::Num(0.0), _) | (_, Expr::Num(0.0)) => Expr::Num(0.0),
        (Expr::Num(1.0), e) | (e, Expr::Num(1.0)) => e,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) if y != 0.0 => Expr::Num(x / y),
        (Expr::Num(0.0), _) => Expr::Num(0.0),
        (e, Expr::Num(1.0)) => e,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (_, Expr::Num(0.0)) => Expr::Num(1.0),
        (e, Expr::Num(1.0)) => e,
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

pub fn call1(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Num(v) if f != Func::Log && f != Func::Sqrt => {
            Expr::Num(Expr::Call(f, vec![Expr::Num(v)]).eval(0.0, 0.0).unwrap_or(f64::NAN))
        }
        a => Expr::Call(f, vec![a]),
    }
}

pub struct Display<'a> {
    e: &'a Expr,
    names: &'a [&'a str],
}

impl Display<'_> {
    fn sub<'b>(&'b self, e: &'b Expr) -> Display<'b> {
        Display {
            e,
            names: self.names,
        }
    }

    fn wrap(&self, f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
        if paren {
            write!(f, "({})", self.sub(e))
        } else {
            write!(f, "{}", self.sub(e))
        }
    }
}

impl fmt::Display for Display<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Expr::*;
        let e = self.e;
        let lvl = e.level();
        match e {
            Num(v) if *v < 0.0 => write!(f, "({v})"),
            Num(v) => write!(f, "{v}"),
            Var(i) => write!(f, "{}", self.names.get(*i).copied().unwrap_or("?")),
            Neg(a) => {
                write!(f, "-")?;
                self.wrap(f, a, a.level() < 3)
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => {
                let op = match e {
                    Add(..) => " + ",
                    Sub(..) => " - ",
                    Mul(..) => "*",
                    _ => "/",
                };
                self.wrap(f, a, a.level() < lvl)?;
                write!(f, "{op}")?;
                self.wrap(f, b, b.level() <= lvl)
            }
            Pow(a, b) => {
                self.wrap(f, a, a.level() <= 4)?;
                write!(f, "^")?;
                self.wrap(f, b, b.level() < 3)
            }
            Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{}", self.sub(a))?;
                }
                write!(f, ")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.display_with(&XY))
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    names: &'a [&'a str],
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError::Syntax {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
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

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            let a = self.unary()?;
            Ok(match a {
                Expr::Num(v) => Expr::Num(-v),
                a => Expr::Neg(Box::new(a)),
            })
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat(b'^') {
            let ex = self.unary()?;
            Ok(Expr::Pow(Box::new(base), Box::new(ex)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
                    self.pos += 1;
                }
                let name = &self.src[start..self.pos];
                if self.eat(b'(') {
                    let func = Func::from_name(name).ok_or_else(|| ExprError::UnknownIdent {
                        name: name.to_string(),
                        offset: start,
                    })?;
                    let mut args = Vec::new();
                    if !self.eat(b')') {
                        loop {
                            args.push(self.expr()?);
                            if self.eat(b')') {
                                break;
                            }
                            if !self.eat(b',') {
                                return Err(self.err("expected `,` or `)`"));
                            }
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(ExprError::Arity {
                            func: func.name(),
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if let Some(i) = self.names.iter().position(|n| *n == name) {
                    Ok(Expr::Var(i))
                } else if name == "pi" {
                    Ok(Expr::Num(std::f64::consts::PI))
                } else {
                    Err(ExprError::UnknownIdent {
                        name: name.to_string(),
                        offset: start,
                    })
                }
            }
            Some(_) => Err(self.err("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
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
        self.src[start..self.pos]
            .parse::<f64>()
            .map(Expr::Num)
            .map_err(|_| ExprError::Syntax {
                offset: start,
                msg: "malformed number".into(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ev(s: &str, x: f64, y: f64) -> f64 {
        Expr::parse(s).unwrap().eval(x, y).unwrap()
    }

    /// Fourth-order central difference.
    fn fd(e: &Expr, var: usize, x: f64, y: f64) -> f64 {
        let h = 1e-3;
        let f = |d: f64| {
            if var == 0 {
                e.eval(x + d, y).unwrap()
            } else {
                e.eval(x, y + d).unwrap()
            }
        };
        (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn evaluates_basic_examples() {
        assert_eq!(ev("2*x + sin(y)", 0.0, 0.0), 0.0);
        assert_eq!(ev("x^2*y", 2.0, 3.0), 12.0);
        assert_eq!(ev("exp(0)", 0.3, -1.0), 1.0);
        assert!((ev("atan2(y,x)", 1.0, 1.0) - PI / 4.0).abs() < 1e-15);
        assert_eq!(ev("sqrt(x^2+y^2)", 3.0, 4.0), 5.0);
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("-2^2", 0.0, 0.0), -4.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(ev("1 - 2 - 3", 0.0, 0.0), -4.0);
        assert_eq!(ev("8/2/2", 0.0, 0.0), 2.0);
        assert_eq!(ev("2*-x", 3.0, 0.0), -6.0);
        assert_eq!(ev("2^-1", 0.0, 0.0), 0.5);
        assert_eq!(ev("(-2)^3", 0.0, 0.0), -8.0);
        assert_eq!(ev("x^2", -3.0, 0.0), 9.0);
        assert!((ev("pi", 0.0, 0.0) - PI).abs() < 1e-16);
        assert_eq!(ev("1.5e2 + .5", 0.0, 0.0), 150.5);
    }

    #[test]
    fn evaluation_errors() {
        let e = Expr::parse("1/(x-x)").unwrap();
        assert!(matches!(e.eval(0.3, 0.1), Err(ExprError::Domain { .. })));
        assert!(Expr::parse("log(x)").unwrap().eval(0.0, 0.0).is_err());
        assert!(Expr::parse("sqrt(x)").unwrap().eval(-1.0, 0.0).is_err());
        assert!(Expr::parse("x^0.5").unwrap().eval(-1.0, 0.0).is_err());
        assert!(Expr::parse("exp(x)").unwrap().eval(1000.0, 0.0).is_err());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            Expr::parse("2*+"),
            Err(ExprError::Syntax { offset: 3, .. })
        ));
        assert!(matches!(
            Expr::parse("foo + 1"),
            Err(ExprError::UnknownIdent { offset: 0, .. })
        ));
        assert!(matches!(
            Expr::parse("atan2(x)"),
            Err(ExprError::Arity { expected: 2, got: 1, .. })
        ));
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("(x").is_err());
        assert!(Expr::parse("x y").is_err());
    }

    #[test]
    fn custom_variable_names() {
        let e = Expr::parse_with("2*t + 1", &["t"]).unwrap();
        assert_eq!(e.eval(3.0, 0.0).unwrap(), 7.0);
        assert!(Expr::parse_with("x", &["t"]).is_err());
    }

    #[test]
    fn derivative_examples() {
        let d = Expr::parse("x*y + sin(x)").unwrap().diff(0);
        for &(x, y) in &[(0.1, 0.2), (1.3, -0.7), (-2.0, 4.0)] {
            assert!((d.eval(x, y).unwrap() - (y + f64::cos(x))).abs() < 1e-14);
        }
        assert_eq!(Expr::parse("3.5").unwrap().diff(0), Expr::Num(0.0));
        let cube = Expr::parse("x^3").unwrap();
        let d3 = cube.diff(0).eval(2.0, 0.0).unwrap();
        assert_eq!(d3, 12.0);
        let h = 1e-5;
        let central = (cube.eval(2.0 + h, 0.0).unwrap() - cube.eval(2.0 - h, 0.0).unwrap()) / (2.0 * h);
        assert!((central - d3).abs() / d3 < 1e-6);
    }

    #[test]
    fn derivative_of_every_function() {
        let cases = [
            "sin(x*y)", "cos(x+y)", "exp(x*y)", "log(1+x^2)", "sqrt(1+y^2)", "abs(x-3)",
            "atan2(y, x+2)", "x^y", "(1+x)^2.5", "x/(1+y^2)", "-x^3",
        ];
        for s in cases {
            let e = Expr::parse(s).unwrap();
            for var in 0..2 {
                let d = e.diff(var);
                let (x, y) = (0.7, 0.4);
                let want = fd(&e, var, x, y);
                let got = d.eval(x, y).unwrap();
                assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{s} d{var}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn substitute_composes() {
        let e = Expr::parse("x^2 + y").unwrap();
        let with = Expr::parse("2*x + 1").unwrap();
        let s = e.substitute(0, &with);
        assert_eq!(s.eval(1.0, 5.0).unwrap(), 14.0);
    }

    #[test]
    fn printing_round_trips_examples() {
        for s in ["-x^2", "(x + y)*(x - y)", "x - (y - 1)", "2^3^x", "(2^3)^x", "-(x*y)", "x/(y/2)", "atan2(y, -x)", "1e-7*x", "(-2)*x"] {
            let e = Expr::parse(s).unwrap();
            let printed = e.to_string();
            assert_eq!(Expr::parse(&printed).unwrap(), e, "{s} -> {printed}");
        }
    }

    fn leaf() -> impl Strategy<Value = Expr> {
        prop_oneof![
            (0u32..50).prop_map(|n| Expr::Num(n as f64 / 8.0)),
            Just(Expr::Var(0)),
            Just(Expr::Var(1)),
        ]
    }

    /// Random expressions over the whole grammar, structurally canonical
    /// (non-negative literals, no negated literals).
    fn any_expr() -> impl Strategy<Value = Expr> {
        leaf().prop_recursive(5, 64, 2, |inner| {
            prop_oneof![
                inner.clone().prop_filter("no negated literal", |e| !matches!(e, Expr::Num(_))).prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Pow(Box::new(a), Box::new(b))),
                (inner.clone(), 0usize..6).prop_map(|(a, k)| {
                    let f = [Func::Sin, Func::Cos, Func::Exp, Func::Log, Func::Sqrt, Func::Abs][k];
                    Expr::Call(f, vec![a])
                }),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Atan2, vec![a, b])),
            ]
        })
    }

    /// Smooth-only grammar: every node is analytic on the sampling box.
    fn smooth_expr() -> impl Strategy<Value = Expr> {
        leaf().prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(neg),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| add(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| sub(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| mul(a, b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| div(a, add(Expr::Num(2.0), mul(b.clone(), b)))),
                (inner.clone(), 2u32..4).prop_map(|(a, n)| pow(a, Expr::Num(n as f64))),
                inner.clone().prop_map(|a| call1(Func::Sin, a)),
                inner.clone().prop_map(|a| call1(Func::Cos, a)),
                inner.clone().prop_map(|a| call1(Func::Exp, call1(Func::Sin, a))),
                inner.clone().prop_map(|a| call1(Func::Log, add(Expr::Num(1.0), mul(a.clone(), a)))),
                inner.clone().prop_map(|a| call1(Func::Sqrt, add(Expr::Num(1.0), mul(a.clone(), a)))),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Atan2, vec![a, add(Expr::Num(2.0), mul(b.clone(), b))])),
            ]
        })
    }

    proptest! {
        #[test]
        fn derivative_matches_finite_differences(e in smooth_expr()) {
            for var in 0..2 {
                let d = e.diff(var);
                for k in 0..5 {
                    let (x, y) = (0.15 + 0.13 * k as f64, 0.8 - 0.11 * k as f64);
                    let want = fd(&e, var, x, y);
                    let got = d.eval(x, y).unwrap();
                    prop_assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{} d{}: {} vs {}", e, var, got, want);
                }
            }
        }

        #[test]
        fn print_parse_round_trip(e in any_expr()) {
            let printed = e.to_string();
            let back = Expr::parse(&printed).unwrap();
            prop_assert_eq!(&back, &e);
            for k in 0..10 {
                let (x, y) = (0.1 + 0.08 * k as f64, 0.9 - 0.07 * k as f64);
                match (e.eval(x, y), back.eval(x, y)) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "eval disagreement"),
                }
            }
        }
    }
}
