//! Iteration-dependent parameter expressions such as `2/(n + 0.01)` or `0.1n`.
//!
//! Grammar (standard precedence, left associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := number 'n'? | 'n' | '(' expr ')'
//! number := '-'? digits ('.' digits)? (('e' | 'E') ('+' | '-')? digits)?
//! ```
//!
//! A literal directly followed by `n` is an implicit product (`0.1n` is `0.1 * n`).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleExpr {
    Const(f64),
    Iteration,
    Binary(BinOp, Box<ScheduleExpr>, Box<ScheduleExpr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("division by zero at n={n}")]
    DivisionByZero { n: u64 },
    #[error("non-finite value at n={n}")]
    NonFinite { n: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Num(f64),
    Var,
    Op(BinOp),
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, ScheduleError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => out.push((start, Token::LParen)),
            b')' => out.push((start, Token::RParen)),
            b'+' => out.push((start, Token::Op(BinOp::Add))),
            b'*' => out.push((start, Token::Op(BinOp::Mul))),
            b'/' => out.push((start, Token::Op(BinOp::Div))),
            b'-' => {
                // A minus is a literal sign only where an operand is expected and a digit follows.
                let operand_expected = matches!(out.last(), None | Some((_, Token::Op(_))) | Some((_, Token::LParen)));
                let digit_next = bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit() || *b == b'.');
                if operand_expected && digit_next {
                    let (value, end) = scan_number(text, i + 1)?;
                    out.push((start, Token::Num(-value)));
                    i = end;
                    continue;
                }
                out.push((start, Token::Op(BinOp::Sub)));
            }
            b'0'..=b'9' | b'.' => {
                let (value, end) = scan_number(text, i)?;
                out.push((start, Token::Num(value)));
                i = end;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = i;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                    end += 1;
                }
                let name = &text[i..end];
                if name != "n" {
                    return Err(ScheduleError::UnknownIdentifier {
                        pos: start,
                        name: name.to_string(),
                    });
                }
                out.push((start, Token::Var));
                i = end;
                continue;
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ScheduleError::Syntax {
                    pos: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        }
        i += 1;
    }
    Ok(out)
}

fn scan_number(text: &str, from: usize) -> Result<(f64, usize), ScheduleError> {
    let bytes = text.as_bytes();
    let mut end = from;
    let digits = |end: &mut usize| {
        let s = *end;
        while *end < bytes.len() && bytes[*end].is_ascii_digit() {
            *end += 1;
        }
        *end > s
    };
    let mut any = digits(&mut end);
    if end < bytes.len() && bytes[end] == b'.' {
        end += 1;
        any |= digits(&mut end);
    }
    if !any {
        return Err(ScheduleError::Syntax {
            pos: from,
            message: "malformed number".into(),
        });
    }
    if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
        let mut exp_end = end + 1;
        if exp_end < bytes.len() && (bytes[exp_end] == b'+' || bytes[exp_end] == b'-') {
            exp_end += 1;
        }
        if digits(&mut exp_end) {
            end = exp_end;
        }
    }
    let value = text[from..end].parse::<f64>().map_err(|e| ScheduleError::Syntax {
        pos: from,
        message: e.to_string(),
    })?;
    Ok((value, end))
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    at: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.at).map(|(_, t)| *t)
    }

    fn pos(&self) -> usize {
        self.tokens.get(self.at).map(|(p, _)| *p).unwrap_or(self.len)
    }

    fn error<T>(&self, message: &str) -> Result<T, ScheduleError> {
        Err(ScheduleError::Syntax {
            pos: self.pos(),
            message: message.to_string(),
        })
    }

    fn expr(&mut self) -> Result<ScheduleExpr, ScheduleError> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ (BinOp::Add | BinOp::Sub))) = self.peek() {
            self.at += 1;
            let rhs = self.term()?;
            lhs = ScheduleExpr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ScheduleExpr, ScheduleError> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op(op @ (BinOp::Mul | BinOp::Div))) = self.peek() {
            self.at += 1;
            let rhs = self.factor()?;
            lhs = ScheduleExpr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<ScheduleExpr, ScheduleError> {
        match self.peek() {
            Some(Token::Num(v)) => {
                self.at += 1;
                if self.peek() == Some(Token::Var) {
                    self.at += 1;
                    return Ok(ScheduleExpr::Binary(
                        BinOp::Mul,
                        Box::new(ScheduleExpr::Const(v)),
                        Box::new(ScheduleExpr::Iteration),
                    ));
                }
                Ok(ScheduleExpr::Const(v))
            }
            Some(Token::Var) => {
                self.at += 1;
                Ok(ScheduleExpr::Iteration)
            }
            Some(Token::LParen) => {
                self.at += 1;
                let inner = self.expr()?;
                if self.peek() != Some(Token::RParen) {
                    return self.error("expected `)`");
                }
                self.at += 1;
                Ok(inner)
            }
            Some(_) => self.error("expected a number, `n` or `(`"),
            None => self.error("unexpected end of expression"),
        }
    }
}

pub fn parse_schedule(text: &str) -> Result<ScheduleExpr, ScheduleError> {
    let tokens = tokenize(text)?;
    let mut p = Parser {
        tokens,
        at: 0,
        len: text.len(),
    };
    let expr = p.expr()?;
    if p.peek().is_some() {
        return p.error("unexpected trailing input");
    }
    Ok(expr)
}

impl FromStr for ScheduleExpr {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_schedule(s)
    }
}

impl ScheduleExpr {
    pub fn constant(v: f64) -> Self {
        ScheduleExpr::Const(v)
    }

    pub fn is_constant(&self) -> bool {
        match self {
            ScheduleExpr::Const(_) => true,
            ScheduleExpr::Iteration => false,
            ScheduleExpr::Binary(_, a, b) => a.is_constant() && b.is_constant(),
        }
    }

    /// Value at iteration `n` (iterations count from 1).
    pub fn eval(&self, n: u64) -> Result<f64, ScheduleError> {
        let v = self.eval_raw(n as f64, n)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ScheduleError::NonFinite { n })
        }
    }

    fn eval_raw(&self, x: f64, n: u64) -> Result<f64, ScheduleError> {
        Ok(match self {
            ScheduleExpr::Const(v) => *v,
            ScheduleExpr::Iteration => x,
            ScheduleExpr::Binary(op, a, b) => {
                let (a, b) = (a.eval_raw(x, n)?, b.eval_raw(x, n)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b == 0.0 => return Err(ScheduleError::DivisionByZero { n }),
                    BinOp::Div => a / b,
                }
            }
        })
    }
}

pub fn eval_schedule(expr: &ScheduleExpr, n: u64) -> Result<f64, ScheduleError> {
    expr.eval(n)
}

impl fmt::Display for ScheduleExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleExpr::Const(v) => write!(f, "{v:?}"),
            ScheduleExpr::Iteration => f.write_str("n"),
            ScheduleExpr::Binary(op, a, b) => {
                let wrap = |e: &ScheduleExpr, right: bool| match e {
                    ScheduleExpr::Binary(inner, ..) => {
                        inner.precedence() < op.precedence()
                            || (right && inner.precedence() == op.precedence())
                    }
                    _ => false,
                };
                let side = |f: &mut fmt::Formatter<'_>, e: &ScheduleExpr, right| {
                    if wrap(e, right) {
                        write!(f, "({e})")
                    } else {
                        write!(f, "{e}")
                    }
                };
                side(f, a, false)?;
                write!(f, " {} ", op.symbol())?;
                side(f, b, true)
            }
        }
    }
}

/// Which algorithm parameter a schedule drives; fixes its admissible domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Alpha,
    Beta,
    Rho,
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamRole::Alpha => "alpha",
            ParamRole::Beta => "beta",
            ParamRole::Rho => "rho",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeViolation {
    pub role: ParamRole,
    pub n: u64,
    /// `None` when evaluation itself failed.
    pub value: Option<f64>,
    pub message: String,
}

impl fmt::Display for RangeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Evaluates `expr` at every `n` in `1..=n_max` and reports values outside the role's domain.
pub fn validate_schedule_range(expr: &ScheduleExpr, n_max: u64, role: ParamRole) -> Vec<RangeViolation> {
    let mut out = Vec::new();
    for n in 1..=n_max.max(1) {
        match expr.eval(n) {
            Ok(v) => {
                let bad = match role {
                    ParamRole::Alpha | ParamRole::Beta => (v < 0.0).then(|| format!("{role} negative at n={n}")),
                    ParamRole::Rho => {
                        (!(0.0..=1.0).contains(&v)).then(|| format!("rho out of [0,1] at n={n}"))
                    }
                };
                if let Some(message) = bad {
                    out.push(RangeViolation {
                        role,
                        n,
                        value: Some(v),
                        message,
                    });
                }
            }
            Err(e) => out.push(RangeViolation {
                role,
                n,
                value: None,
                message: format!("{role}: {e}"),
            }),
        }
        // A constant is the same everywhere; one report is enough.
        if expr.is_constant() {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TABLE: [[&str; 3]; 4] = [
        ["0.25", "2.0", "1.0"],
        ["0.25", "2.0", "0.0"],
        ["0.25", "2/(n + 0.01)", "0.1n"],
        ["0.25", "0.2n", "1/(n + 0.01)"],
    ];

    #[test]
    fn constants_and_division() {
        assert_eq!(parse_schedule("0.25").unwrap(), ScheduleExpr::Const(0.25));
        match parse_schedule("2/(n + 0.01)").unwrap() {
            ScheduleExpr::Binary(BinOp::Div, a, _) => assert_eq!(*a, ScheduleExpr::Const(2.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(parse_schedule("n n"), Err(ScheduleError::Syntax { pos: 2, .. })));
        assert!(matches!(parse_schedule("2*(n"), Err(ScheduleError::Syntax { .. })));
        assert!(matches!(parse_schedule(""), Err(ScheduleError::Syntax { .. })));
        assert!(matches!(parse_schedule("2 +"), Err(ScheduleError::Syntax { .. })));
        assert!(matches!(
            parse_schedule("exp(n)"),
            Err(ScheduleError::UnknownIdentifier { pos: 0, .. })
        ));
        assert!(matches!(parse_schedule("-n"), Err(ScheduleError::Syntax { .. })));
    }

    #[test]
    fn evaluation() {
        let e = parse_schedule("2/(n + 0.01)").unwrap();
        assert!((e.eval(1).unwrap() - 2.0 / 1.01).abs() < 1e-15);
        assert_eq!(parse_schedule("0.1n").unwrap().eval(10).unwrap(), 1.0);
        assert_eq!(parse_schedule("0.25").unwrap().eval(77).unwrap(), 0.25);
        assert_eq!(parse_schedule("1 - 2 - 3").unwrap().eval(1).unwrap(), -4.0);
        assert_eq!(parse_schedule("8/4/2").unwrap().eval(1).unwrap(), 1.0);
        assert_eq!(parse_schedule("1 + 2 * 3").unwrap().eval(1).unwrap(), 7.0);
        assert_eq!(parse_schedule("-0.5 * n").unwrap().eval(4).unwrap(), -2.0);
        assert_eq!(parse_schedule("1 - -0.5").unwrap().eval(4).unwrap(), 1.5);
    }

    #[test]
    fn evaluation_errors() {
        let e = parse_schedule("1/(n - 3)").unwrap();
        assert_eq!(e.eval(3), Err(ScheduleError::DivisionByZero { n: 3 }));
        let e = parse_schedule("1e308 * 10 * n").unwrap();
        assert_eq!(e.eval(1), Err(ScheduleError::NonFinite { n: 1 }));
    }

    #[test]
    fn domain_checks() {
        let rho = parse_schedule("0.25").unwrap();
        assert!(validate_schedule_range(&rho, 500, ParamRole::Rho).is_empty());
        let alpha = parse_schedule("0.2n").unwrap();
        assert!(validate_schedule_range(&alpha, 500, ParamRole::Alpha).is_empty());
        let v = validate_schedule_range(&parse_schedule("n").unwrap(), 2, ParamRole::Rho);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].n, 2);
        assert_eq!(v[0].message, "rho out of [0,1] at n=2");
        let v = validate_schedule_range(&parse_schedule("2").unwrap(), 500, ParamRole::Rho);
        assert_eq!(v[0].message, "rho out of [0,1] at n=1");
        let v = validate_schedule_range(&parse_schedule("1 - n").unwrap(), 3, ParamRole::Beta);
        assert_eq!(v.iter().map(|v| v.n).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn every_table_cell_is_valid_for_500_iterations() {
        for row in TABLE {
            let roles = [ParamRole::Rho, ParamRole::Alpha, ParamRole::Beta];
            for (cell, role) in row.iter().zip(roles) {
                let e = parse_schedule(cell).unwrap();
                assert!(validate_schedule_range(&e, 500, role).is_empty(), "{cell}");
            }
        }
    }

    #[test]
    fn pretty_print_keeps_structure() {
        for text in ["2/(n + 0.01)", "0.1n", "1 - (2 - n)", "(1 + n) * 3", "8/(4/n)", "-0.5 * n"] {
            let e = parse_schedule(text).unwrap();
            assert_eq!(parse_schedule(&e.to_string()).unwrap(), e, "{text} -> {e}");
        }
    }

    fn arb_expr() -> impl Strategy<Value = ScheduleExpr> {
        let leaf = prop_oneof![
            (-1000.0f64..1000.0).prop_map(ScheduleExpr::Const),
            Just(ScheduleExpr::Iteration),
        ];
        leaf.prop_recursive(4, 32, 2, |inner| {
            (
                prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div)],
                inner.clone(),
                inner,
            )
                .prop_map(|(op, a, b)| ScheduleExpr::Binary(op, Box::new(a), Box::new(b)))
        })
    }

    proptest! {
        #[test]
        fn print_parse_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse_schedule(&printed).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(parse_schedule(&back.to_string()).unwrap(), back);
        }

        #[test]
        fn evaluation_is_pure(e in arb_expr(), n in 1u64..1000) {
            prop_assert_eq!(e.eval(n), e.eval(n));
        }
    }
}
