//! Closed-form coefficient expressions.
//!
//! Grammar (standard precedence, `^` binds tightest and is right-associative,
//! then unary minus, then `*` `/`, then `+` `-`):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident '(' expr ')' | variable | '(' expr ')'
//! ```
//!
//! Variables are `x1..xn`, `y1..yn` for a declared dimension n (or the single
//! variable `t` for periodic profiles); functions are `sqrt`, `sin`, `cos`,
//! `exp`, `log`. There is no absolute-value function: norms must be written
//! through sqrt of squares, which keeps every expression smooth where defined.
//!
//! Trees are immutable after parsing and evaluation is pure, so expressions
//! can be shared freely across threads.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::jet::{self, Jet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sqrt,
    Sin,
    Cos,
    Exp,
    Log,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sqrt => "sqrt",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Literal(f64),
    /// Variable slot: for phase space, 0..n are x1..xn and n..2n are y1..yn.
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// Variable space an expression is parsed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarSpace {
    /// x1..xn, y1..yn on the slit bundle over an n-dimensional base.
    Phase(usize),
    /// The single angle variable `t` of planar profiles.
    Angle,
}

impl VarSpace {
    pub fn nvars(self) -> usize {
        match self {
            VarSpace::Phase(n) => 2 * n,
            VarSpace::Angle => 1,
        }
    }

    fn var_name(self, slot: usize) -> String {
        match self {
            VarSpace::Phase(n) => {
                if slot < n {
                    format!("x{}", slot + 1)
                } else {
                    format!("y{}", slot + 1 - n)
                }
            }
            VarSpace::Angle => "t".to_string(),
        }
    }
}

/// A parsed, immutable expression tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    vars: VarSpace,
    root: Node,
}

/// Parse an expression over phase variables x1..xn, y1..yn.
pub fn parse(text: &str, dimension: usize) -> Result<Expression> {
    Parser::new(text, VarSpace::Phase(dimension)).parse_all()
}

/// Parse a profile expression over the single variable t.
pub fn parse_angle(text: &str) -> Result<Expression> {
    Parser::new(text, VarSpace::Angle).parse_all()
}

impl Expression {
    pub fn vars(&self) -> VarSpace {
        self.vars
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Taylor coefficients of the expression at `point` up to total `order`.
    /// `point` lists the variables in slot order (x1..xn, y1..yn, or t).
    pub fn evaluate_jet(&self, point: &[f64], order: usize) -> Result<Jet> {
        let nvars = self.vars.nvars();
        if point.len() != nvars {
            return Err(Error::Dimension { expected: nvars, got: point.len() });
        }
        let layout = jet::layout(nvars, order)?;
        eval(&self.root, &layout, point)
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64> {
        Ok(self.evaluate_jet(point, 0)?.value())
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, self.vars, 0)
    }
}

fn precedence(node: &Node) -> u8 {
    match node {
        Node::Add(..) | Node::Sub(..) => 1,
        Node::Mul(..) | Node::Div(..) => 2,
        Node::Neg(..) => 3,
        Node::Pow(..) => 4,
        Node::Literal(_) | Node::Var(_) | Node::Call(..) => 5,
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, vars: VarSpace, min_prec: u8) -> fmt::Result {
    let prec = precedence(node);
    let parens = prec < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match node {
        Node::Literal(v) => write!(f, "{v}")?,
        Node::Var(slot) => write!(f, "{}", vars.var_name(*slot))?,
        Node::Neg(a) => {
            write!(f, "-")?;
            write_node(f, a, vars, 3)?;
        }
        Node::Add(a, b) => {
            write_node(f, a, vars, 1)?;
            write!(f, "+")?;
            write_node(f, b, vars, 2)?;
        }
        Node::Sub(a, b) => {
            write_node(f, a, vars, 1)?;
            write!(f, "-")?;
            write_node(f, b, vars, 2)?;
        }
        Node::Mul(a, b) => {
            write_node(f, a, vars, 2)?;
            write!(f, "*")?;
            write_node(f, b, vars, 3)?;
        }
        Node::Div(a, b) => {
            write_node(f, a, vars, 2)?;
            write!(f, "/")?;
            write_node(f, b, vars, 3)?;
        }
        Node::Pow(a, b) => {
            write_node(f, a, vars, 5)?;
            write!(f, "^")?;
            write_node(f, b, vars, 4)?;
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(f, a, vars, 0)?;
            write!(f, ")")?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

/// Value of a variable-free subtree, if it evaluates cleanly.
fn constant_value(node: &Node) -> Option<f64> {
    match node {
        Node::Literal(v) => Some(*v),
        Node::Var(_) => None,
        Node::Neg(a) => constant_value(a).map(|v| -v),
        Node::Add(a, b) => Some(constant_value(a)? + constant_value(b)?),
        Node::Sub(a, b) => Some(constant_value(a)? - constant_value(b)?),
        Node::Mul(a, b) => Some(constant_value(a)? * constant_value(b)?),
        Node::Div(a, b) => {
            let d = constant_value(b)?;
            if d == 0.0 {
                None
            } else {
                Some(constant_value(a)? / d)
            }
        }
        Node::Pow(a, b) => {
            let v = constant_value(a)?.powf(constant_value(b)?);
            v.is_finite().then_some(v)
        }
        Node::Call(func, a) => {
            let v = constant_value(a)?;
            let r = match func {
                Func::Sqrt => v.sqrt(),
                Func::Sin => v.sin(),
                Func::Cos => v.cos(),
                Func::Exp => v.exp(),
                Func::Log => v.ln(),
            };
            r.is_finite().then_some(r)
        }
    }
}

fn eval(node: &Node, layout: &Arc<jet::JetLayout>, point: &[f64]) -> Result<Jet> {
    match node {
        Node::Literal(v) => Ok(Jet::constant(layout.clone(), *v)),
        Node::Var(slot) => Ok(Jet::variable(layout.clone(), point[*slot], *slot)),
        Node::Neg(a) => Ok(eval(a, layout, point)?.neg()),
        Node::Add(a, b) => Ok(eval(a, layout, point)?.add(&eval(b, layout, point)?)),
        Node::Sub(a, b) => Ok(eval(a, layout, point)?.sub(&eval(b, layout, point)?)),
        Node::Mul(a, b) => Ok(eval(a, layout, point)?.mul(&eval(b, layout, point)?)),
        Node::Div(a, b) => eval(a, layout, point)?.div(&eval(b, layout, point)?),
        Node::Pow(a, b) => {
            let base = eval(a, layout, point)?;
            // Integer exponents go through repeated multiplication so that
            // negative bases stay legal; anything else is exp(b·log a).
            if let Some(c) = constant_value(b) {
                if c.fract() == 0.0 && c.abs() <= 2_147_483_647.0 {
                    return base.powi(c as i64);
                }
            }
            let expo = eval(b, layout, point)?;
            Ok(expo.mul(&base.ln()?).exp())
        }
        Node::Call(func, a) => {
            let inner = eval(a, layout, point)?;
            match func {
                Func::Sqrt => inner.sqrt(),
                Func::Sin => Ok(inner.sin()),
                Func::Cos => Ok(inner.cos()),
                Func::Exp => Ok(inner.exp()),
                Func::Log => inner.ln(),
            }
        }
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    vars: VarSpace,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, vars: VarSpace) -> Self {
        Parser { text: text.as_bytes(), pos: 0, vars }
    }

    fn parse_all(mut self) -> Result<Expression> {
        self.skip_ws();
        if self.pos >= self.text.len() {
            return Err(self.err("empty expression"));
        }
        let root = self.expr()?;
        self.skip_ws();
        if self.pos < self.text.len() {
            return Err(self.err("unexpected trailing input"));
        }
        Ok(Expression { vars: self.vars, root })
    }

    fn err(&self, message: &str) -> Error {
        Error::Syntax { position: self.pos, message: message.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
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

    fn expr(&mut self) -> Result<Node> {
        let mut node = self.term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    node = Node::Add(Box::new(node), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    node = Node::Sub(Box::new(node), Box::new(self.term()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut node = self.unary()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    node = Node::Mul(Box::new(node), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    node = Node::Div(Box::new(node), Box::new(self.unary()?));
                }
                _ => return Ok(node),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        self.skip_ws();
        if self.peek() == Some(b'-') {
            self.pos += 1;
            Ok(Node::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        self.skip_ws();
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // right-associative; exponent may carry a unary minus
            let expo = self.unary()?;
            Ok(Node::Pow(Box::new(base), Box::new(expo)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Node> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(_) => Err(self.err("expected a number, variable, function, or `(`")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
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
                // `e` belonged to an identifier or was stray; back off
                self.pos = mark;
            }
        }
        let token = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        let value: f64 = token
            .parse()
            .map_err(|_| Error::Syntax { position: start, message: format!("bad number `{token}`") })?;
        if !value.is_finite() {
            return Err(Error::Syntax { position: start, message: format!("numeric literal `{token}` overflows") });
        }
        Ok(Node::Literal(value))
    }

    fn identifier(&mut self) -> Result<Node> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.text[start..self.pos]).unwrap().to_string();
        let func = match name.as_str() {
            "sqrt" => Some(Func::Sqrt),
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "log" => Some(Func::Log),
            _ => None,
        };
        if let Some(func) = func {
            if !self.eat(b'(') {
                return Err(self.err("expected `(` after function name"));
            }
            let arg = self.expr()?;
            if !self.eat(b')') {
                return Err(self.err("expected `)`"));
            }
            return Ok(Node::Call(func, Box::new(arg)));
        }
        match self.vars {
            VarSpace::Angle => {
                if name == "t" {
                    Ok(Node::Var(0))
                } else {
                    Err(Error::UnknownIdentifier { name, position: start })
                }
            }
            VarSpace::Phase(n) => {
                let head = name.as_bytes()[0];
                let tail = &name[1..];
                if (head == b'x' || head == b'y') && !tail.is_empty() && tail.bytes().all(|c| c.is_ascii_digit()) {
                    let idx: usize = tail
                        .parse()
                        .map_err(|_| Error::VariableOutOfRange { name: name.clone(), dimension: n })?;
                    if idx < 1 || idx > n {
                        return Err(Error::VariableOutOfRange { name, dimension: n });
                    }
                    let slot = if head == b'x' { idx - 1 } else { n + idx - 1 };
                    Ok(Node::Var(slot))
                } else {
                    Err(Error::UnknownIdentifier { name, position: start })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_spiral_coefficient() {
        let e = parse("sqrt(y1^2+y2^2+y3^2)*y2/2", 3).unwrap();
        // Γ¹ at y = (1, 2, 2): |y| = 3, value 3·2/2 = 3.
        let v = e.evaluate(&[0.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((v - 3.0).abs() < 1e-14);
    }

    #[test]
    fn parses_constant_zero() {
        let e = parse("0", 3).unwrap();
        assert_eq!(e.root(), &Node::Literal(0.0));
    }

    #[test]
    fn rejects_out_of_range_variable() {
        assert!(matches!(parse("y4", 3), Err(Error::VariableOutOfRange { .. })));
        assert!(matches!(parse("x0", 3), Err(Error::VariableOutOfRange { .. })));
        assert!(parse("y3", 3).is_ok());
    }

    #[test]
    fn rejects_unknown_identifier() {
        assert!(matches!(parse("tan(x1)", 2), Err(Error::UnknownIdentifier { .. })));
        assert!(matches!(parse("abs(y1)", 2), Err(Error::UnknownIdentifier { .. })));
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse("y1 + * y2", 2) {
            Err(Error::Syntax { position, .. }) => assert_eq!(position, 5),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn product_jet_first_order() {
        let e = parse("y1*y2", 2).unwrap();
        let j = e.evaluate_jet(&[0.0, 0.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(j.value(), 2.0);
        assert_eq!(j.d1(2), 2.0); // ∂/∂y1
        assert_eq!(j.d1(3), 1.0); // ∂/∂y2
    }

    #[test]
    fn norm_jet_second_order() {
        let e = parse("sqrt(y1^2+y2^2)", 2).unwrap();
        let j = e.evaluate_jet(&[0.0, 0.0, 3.0, 4.0], 2).unwrap();
        assert!((j.value() - 5.0).abs() < 1e-14);
        assert!((j.d1(2) - 0.6).abs() < 1e-14);
        assert!((j.d2(2, 2) - 16.0 / 125.0).abs() < 1e-14);
    }

    #[test]
    fn division_by_zero_any_order() {
        let e = parse("1/y1", 1).unwrap();
        for order in 0..=2 {
            assert!(matches!(e.evaluate_jet(&[0.0, 0.0], order), Err(Error::DivisionByZero)));
        }
    }

    #[test]
    fn integer_power_of_negative_base() {
        let e = parse("y1^3", 1).unwrap();
        let j = e.evaluate_jet(&[0.0, -2.0], 1).unwrap();
        assert_eq!(j.value(), -8.0);
        assert_eq!(j.d1(1), 12.0);
    }

    #[test]
    fn power_precedence_and_associativity() {
        // ^ binds tighter than unary minus: -x^2 = -(x^2)
        let e = parse("-x1^2", 1).unwrap();
        let v = e.evaluate(&[3.0, 1.0]).unwrap();
        assert_eq!(v, -9.0);
        // right associativity: 2^3^2 = 2^9 = 512
        let e = parse("2^3^2", 1).unwrap();
        assert_eq!(e.evaluate(&[0.0, 1.0]).unwrap(), 512.0);
    }

    #[test]
    fn angle_variable_space() {
        let e = parse_angle("1+0.5*cos(2*t)").unwrap();
        let v = e.evaluate(&[std::f64::consts::PI / 2.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-14);
        assert!(matches!(parse_angle("x1"), Err(Error::UnknownIdentifier { .. })));
    }

    #[test]
    fn display_reparse_identity() {
        for text in [
            "sqrt(y1^2+y2^2+y3^2)*y2/2",
            "-x1^2+y1*(x2-3)/2",
            "exp(log(y1))^-2",
            "1-2-3",
            "2^-x1",
            "-(x1+y1)*y2",
        ] {
            let e = parse(text, 3).unwrap();
            let shown = e.to_string();
            let e2 = parse(&shown, 3).unwrap();
            assert_eq!(e, e2, "round trip failed for `{text}` -> `{shown}`");
        }
    }

    #[test]
    fn jet_order_restriction_consistency() {
        let e = parse("exp(x1*y1)/sqrt(y1^2+y2^2)", 2).unwrap();
        let p = [0.3, -0.2, 1.1, 0.7];
        let j3 = e.evaluate_jet(&p, 3).unwrap();
        let j2 = e.evaluate_jet(&p, 2).unwrap();
        let t = j3.truncate(2).unwrap();
        for (a, b) in t.coeffs.iter().zip(&j2.coeffs) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
